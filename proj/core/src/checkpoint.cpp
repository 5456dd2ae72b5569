// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "sbt/net.hpp"

namespace sbt {

namespace {

constexpr unsigned char kMagic[4] = {'S', 'B', 'T', 'F'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<unsigned char> take() { return std::move(out_); }

 private:
  std::vector<unsigned char> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const unsigned char> raw(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const Autoencoder<float>& model) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(model.config().to_keyvalues().to_text());
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->shape.size()));
    for (auto d : p->shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : p->value) w.f32(v);
  }
  return w.take();
}

void save_checkpoint(const std::string& path, const Autoencoder<float>& model) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Autoencoder<float> deserialize_checkpoint(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  const auto magic = r.raw(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic (expected SBTF)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_keyvalues(KeyValues::parse(r.str()));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("checkpoint: bad config block: ") + e.what());
  }
  Autoencoder<float> model(cfg);
  auto params = model.parameters();
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) +
                             " tensors, found " + std::to_string(count));
  }
  for (auto* p : params) {
    const std::string name = r.str();
    if (name != p->name) {
      throw std::runtime_error("checkpoint: expected tensor " + p->name + ", found " + name);
    }
    ad::Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (shape != p->shape) {
      throw std::runtime_error("checkpoint: tensor " + name + " has shape " +
                               ad::shape_str(shape) + ", expected " + ad::shape_str(p->shape));
    }
    for (auto& v : p->value) v = r.f32();
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return model;
}

Autoencoder<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace sbt
