// SPDX-License-Identifier: Apache-2.0
//
// JSON-over-HTTP inference service for interactive latent editing:
//
//   POST /encode  {"points": [[x, y], ...]}
//                 -> {"control_points": [[...] x n_ctrl], "trajectory": [[...] x L]}
//   POST /decode  {"control_points": [[...] x n_ctrl], "num_samples": L_out}
//                 -> {"points": [[x, y] x L_out], "trajectory": [...]}
//   GET  /model   -> config summary, checkpoint id and strategy
//
// Numbers are written with 9 significant digits, which round-trips float32.
// Status codes: 400 malformed body, 422 wrong shapes or lengths, 503 no model.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "sbt/net.hpp"

namespace sbt {

struct HttpReply {
  int status = 200;
  std::string body;  // application/json
};

/// Transport-independent request handling over one frozen model. All
/// handlers are const and safe to call concurrently.
class InferenceService {
 public:
  static constexpr std::size_t kMinLength = 2;
  static constexpr std::size_t kMaxLength = 4096;

  InferenceService() = default;
  InferenceService(std::shared_ptr<const Autoencoder<float>> model, std::string checkpoint_id);

  bool has_model() const { return model_ != nullptr; }
  const std::string& checkpoint_id() const { return checkpoint_id_; }

  HttpReply encode(std::string_view body) const;
  HttpReply decode(std::string_view body) const;
  HttpReply model_info() const;

 private:
  std::size_t max_length() const;

  std::shared_ptr<const Autoencoder<float>> model_;
  std::string checkpoint_id_;
};

/// Hex FNV-1a 64 digest of the serialized checkpoint.
std::string checkpoint_id(const Autoencoder<float>& model);

/// Rounds to 9 significant decimal digits.
double round_sig9(double value);

class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<const InferenceService> service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds host:port (port 0 picks a free port). Returns false when the
  /// address is unavailable.
  bool bind(const std::string& host, int port);
  int port() const { return port_; }
  /// Serves until stop() is called. Requires a successful bind().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = -1;
};

}  // namespace sbt
