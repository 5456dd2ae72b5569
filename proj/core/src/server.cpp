// SPDX-License-Identifier: Apache-2.0

#include "sbt/server.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <httplib.h>
#include <json.hpp>

namespace sbt {

namespace {

using nlohmann::json;

HttpReply error_reply(int status, const std::string& message) {
  return {status, json{{"error", message}}.dump()};
}

json matrix_json(const std::vector<float>& values, std::size_t rows, std::size_t cols,
                 std::size_t offset = 0) {
  json out = json::array();
  for (std::size_t r = 0; r < rows; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < cols; ++c) {
      row.push_back(round_sig9(values[offset + r * cols + c]));
    }
    out.push_back(std::move(row));
  }
  return out;
}

struct Parsed {
  std::vector<float> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Returns false with a 400 reply when `node` is not a list of numeric lists.
// Ragged rows are reported as 422 via `ragged`.
bool parse_matrix(const json& node, const char* field, Parsed& out, HttpReply& err) {
  if (!node.is_array()) {
    err = error_reply(400, std::string("'") + field + "' must be an array of arrays of numbers");
    return false;
  }
  out.rows = node.size();
  for (std::size_t r = 0; r < node.size(); ++r) {
    const json& row = node[r];
    if (!row.is_array()) {
      err = error_reply(400, std::string("'") + field + "' row " + std::to_string(r) +
                                 " is not an array");
      return false;
    }
    if (r == 0) out.cols = row.size();
    if (row.size() != out.cols) {
      err = error_reply(422, std::string("'") + field + "' rows have different lengths");
      return false;
    }
    for (const json& v : row) {
      if (!v.is_number()) {
        err = error_reply(400, std::string("'") + field + "' contains a non-number");
        return false;
      }
      out.values.push_back(v.get<float>());
    }
  }
  return true;
}

bool parse_object(std::string_view body, json& out, HttpReply& err) {
  out = json::parse(body, nullptr, false);
  if (out.is_discarded() || !out.is_object()) {
    err = error_reply(400, "request body must be a JSON object");
    return false;
  }
  return true;
}

}  // namespace

double round_sig9(double value) {
  if (!std::isfinite(value) || value == 0.0) return value;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return std::strtod(buf, nullptr);
}

std::string checkpoint_id(const Autoencoder<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_checkpoint(model)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

InferenceService::InferenceService(std::shared_ptr<const Autoencoder<float>> model,
                                   std::string checkpoint_id)
    : model_(std::move(model)), checkpoint_id_(std::move(checkpoint_id)) {}

std::size_t InferenceService::max_length() const {
  return std::min(kMaxLength, model_->config().max_len);
}

HttpReply InferenceService::encode(std::string_view body) const {
  if (!model_) return error_reply(503, "no model loaded");
  HttpReply err;
  json req;
  if (!parse_object(body, req, err)) return err;
  if (!req.contains("points")) return error_reply(400, "missing 'points'");
  Parsed pts;
  if (!parse_matrix(req["points"], "points", pts, err)) return err;
  const auto& cfg = model_->config();
  if (pts.rows < kMinLength || pts.rows > max_length()) {
    return error_reply(422, "need between " + std::to_string(kMinLength) + " and " +
                                std::to_string(max_length()) + " points, got " +
                                std::to_string(pts.rows));
  }
  if (pts.cols != cfg.data_dim) {
    return error_reply(422, "points must have " + std::to_string(cfg.data_dim) +
                                " coordinates, got " + std::to_string(pts.cols));
  }
  const auto inf = run_forward<float>(*model_, pts.values, 1, pts.rows, pts.rows);
  json out;
  out["control_points"] = matrix_json(inf.latent, cfg.n_ctrl, cfg.latent_dim);
  out["trajectory"] = matrix_json(inf.trajectory, pts.rows, cfg.trajectory_width());
  return {200, out.dump()};
}

HttpReply InferenceService::decode(std::string_view body) const {
  if (!model_) return error_reply(503, "no model loaded");
  HttpReply err;
  json req;
  if (!parse_object(body, req, err)) return err;
  if (!req.contains("control_points")) return error_reply(400, "missing 'control_points'");
  const auto& cfg = model_->config();
  std::size_t out_len = cfg.seq_len;
  if (req.contains("num_samples")) {
    const json& n = req["num_samples"];
    if (!n.is_number_integer()) return error_reply(400, "'num_samples' must be an integer");
    const auto v = n.get<std::int64_t>();
    if (v < static_cast<std::int64_t>(kMinLength) ||
        v > static_cast<std::int64_t>(max_length())) {
      return error_reply(422, "num_samples must be between " + std::to_string(kMinLength) +
                                  " and " + std::to_string(max_length()));
    }
    out_len = static_cast<std::size_t>(v);
  }
  Parsed ctrl;
  if (!parse_matrix(req["control_points"], "control_points", ctrl, err)) return err;
  if (ctrl.rows != cfg.n_ctrl || ctrl.cols != cfg.latent_dim) {
    return error_reply(422, "control_points must be " + std::to_string(cfg.n_ctrl) + " x " +
                                std::to_string(cfg.latent_dim) + ", got " +
                                std::to_string(ctrl.rows) + " x " + std::to_string(ctrl.cols));
  }
  const auto inf = run_decode<float>(*model_, ctrl.values, 1, out_len);
  json out;
  out["points"] = matrix_json(inf.recon, out_len, cfg.data_dim);
  out["trajectory"] = matrix_json(inf.trajectory, out_len, cfg.trajectory_width());
  return {200, out.dump()};
}

HttpReply InferenceService::model_info() const {
  if (!model_) return error_reply(503, "no model loaded");
  const auto& cfg = model_->config();
  json out;
  out["checkpoint_id"] = checkpoint_id_;
  out["strategy"] = to_string(cfg.strategy);
  out["config"] = {{"d", cfg.latent_dim},
                   {"n_layers", cfg.n_layers},
                   {"h", cfg.heads},
                   {"c", cfg.width},
                   {"ffn_factor", cfg.ffn_factor},
                   {"n_ctrl", cfg.n_ctrl},
                   {"data_dim", cfg.data_dim},
                   {"seq_len", cfg.seq_len},
                   {"max_len", max_length()},
                   {"parameters", model_->parameter_count()}};
  return {200, out.dump()};
}

// --- HTTP transport -------------------------------------------------------------------

struct HttpServer::Impl {
  httplib::Server http;
  std::shared_ptr<const InferenceService> service;
};

namespace {

bool local_origin(const std::string& origin) {
  for (const char* prefix : {"http://localhost", "http://127.0.0.1", "http://[::1]"}) {
    const std::string p(prefix);
    if (origin.compare(0, p.size(), p) == 0 &&
        (origin.size() == p.size() || origin[p.size()] == ':')) {
      return true;
    }
  }
  return false;
}

void add_cors(const httplib::Request& req, httplib::Response& res) {
  const auto origin = req.get_header_value("Origin");
  if (local_origin(origin)) {
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Vary", "Origin");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  }
}

void send(const httplib::Request& req, httplib::Response& res, const HttpReply& reply) {
  add_cors(req, res);
  res.status = reply.status;
  res.set_content(reply.body, "application/json");
}

}  // namespace

HttpServer::HttpServer(std::shared_ptr<const InferenceService> service)
    : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto& http = impl_->http;
  const InferenceService* svc = impl_->service.get();
  // httplib defaults to SO_REUSEPORT, which would let a second server share a busy port.
  http.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  http.Post("/encode", [svc](const httplib::Request& req, httplib::Response& res) {
    send(req, res, svc->encode(req.body));
  });
  http.Post("/decode", [svc](const httplib::Request& req, httplib::Response& res) {
    send(req, res, svc->decode(req.body));
  });
  http.Get("/model", [svc](const httplib::Request& req, httplib::Response& res) {
    send(req, res, svc->model_info());
  });
  http.Options(R"(/.*)", [](const httplib::Request& req, httplib::Response& res) {
    add_cors(req, res);
    res.status = 204;
  });
  http.set_exception_handler(
      [](const httplib::Request& req, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
          std::rethrow_exception(ep);
        } catch (const std::exception& e) {
          what = e.what();
        } catch (...) {
        }
        send(req, res, error_reply(500, what));
      });
}

HttpServer::~HttpServer() { stop(); }

bool HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->http.bind_to_any_port(host);
    return port_ > 0;
  }
  if (!impl_->http.bind_to_port(host, port)) return false;
  port_ = port;
  return true;
}

void HttpServer::run() { impl_->http.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->http.stop();
}

}  // namespace sbt
