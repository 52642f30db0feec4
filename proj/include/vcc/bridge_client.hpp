#pragma once

// Client side of the model bridge: an external process serving a model over
// newline-delimited JSON on its stdin/stdout. Tensors travel as base64 of
// little-endian binary32 with an explicit shape.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <bit>
#include <cerrno>
#include <cstring>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "vcc/oracle.hpp"

extern char** environ;

namespace vcc {

namespace bridge {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kMaxPayloadBytes = std::size_t{256} << 20;

inline std::string base64_encode(std::span<const std::uint8_t> in) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= in.size(); i += 3) {
    const std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += {tbl[v >> 18], tbl[(v >> 12) & 63], tbl[(v >> 6) & 63], tbl[v & 63]};
  }
  if (const std::size_t rest = in.size() - i; rest > 0) {
    const std::uint32_t v = (in[i] << 16) | (rest == 2 ? in[i + 1] << 8 : 0);
    out += {tbl[v >> 18], tbl[(v >> 12) & 63], rest == 2 ? tbl[(v >> 6) & 63] : '=', '='};
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view s) {
  static const std::array<int, 256> rev = [] {
    std::array<int, 256> r{};
    r.fill(-1);
    const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    for (int i = 0; i < 64; ++i) r[static_cast<unsigned char>(tbl[i])] = i;
    return r;
  }();
  require(s.size() % 4 == 0, ErrorKind::bridge, "base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=' && i + 4 == s.size() && k >= 2) {
        v[k] = 0;
        ++pad;
      } else {
        require(pad == 0, ErrorKind::bridge, "malformed base64 padding");
        v[k] = rev[static_cast<unsigned char>(c)];
        require(v[k] >= 0, ErrorKind::bridge, "invalid base64 character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

inline nlohmann::json encode_tensor(std::span<const float> values, const Shape& shape) {
  require(values.size() == shape_size(shape), ErrorKind::bridge, "tensor payload does not match its shape");
  require(values.size() * 4 <= kMaxPayloadBytes, ErrorKind::bridge, "tensor payload exceeds 256 MiB");
  std::vector<std::uint8_t> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(u >> (8 * b));
  }
  return {{"shape", shape}, {"data", base64_encode(bytes)}};
}

inline nlohmann::json encode_tensor(const Tensor& t) { return encode_tensor(t.data(), t.shape()); }

inline Tensor decode_tensor(const nlohmann::json& j) {
  try {
    const Shape shape = j.at("shape").get<Shape>();
    const std::string& data = j.at("data").get_ref<const std::string&>();
    require(data.size() / 4 * 3 <= kMaxPayloadBytes + 3, ErrorKind::bridge, "tensor payload exceeds 256 MiB");
    const auto bytes = base64_decode(data);
    require(!shape.empty(), ErrorKind::bridge, "tensor payload without a shape");
    for (int d : shape) require(d > 0, ErrorKind::bridge, "tensor shape must be positive");
    require(bytes.size() == 4 * shape_size(shape), ErrorKind::bridge,
            "payload byte length differs from 4 x prod(shape)");
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
      t[i] = std::bit_cast<float>(u);
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::bridge, std::string("malformed tensor payload: ") + e.what());
  }
}

}  // namespace bridge

/// Oracle backed by a spawned bridge process. Calls are serialised; the
/// pipeline treats it as non-concurrent.
class BridgeOracle : public ModelOracle {
 public:
  explicit BridgeOracle(std::vector<std::string> argv) {
    spawn(std::move(argv));
    try {
      handshake();
    } catch (...) {
      shutdown();
      throw;
    }
  }

  ~BridgeOracle() override { shutdown(); }

  BridgeOracle(const BridgeOracle&) = delete;
  BridgeOracle& operator=(const BridgeOracle&) = delete;

  Shape input_shape() const override { return input_shape_; }
  int class_count() const override { return class_count_; }
  std::vector<int> taps() const override { return taps_; }
  int last_layer() const override { return static_cast<int>(shapes_.size()) - 1; }
  std::string model_hash() const override { return model_hash_; }

  Shape layer_shape(int layer) const override {
    require(layer >= -1 && layer < static_cast<int>(shapes_.size()), ErrorKind::index, "layer index out of range");
    return layer < 0 ? input_shape_ : shapes_[static_cast<std::size_t>(layer)];
  }

  Tensor forward_to(const Tensor& image, int layer) override {
    return tensor_call({{"op", "forward_to"}, {"layer", layer}, {"input", bridge::encode_tensor(image)}});
  }

  Tensor forward_between(const Tensor& act, int from, int to) override {
    return tensor_call(
        {{"op", "forward_between"}, {"from", from}, {"to", to}, {"input", bridge::encode_tensor(act)}});
  }

  Tensor distance_grad(const Tensor& act, int from, int to, std::span<const double> centroid) override {
    std::vector<float> q(centroid.begin(), centroid.end());
    return tensor_call({{"op", "distance_grad"},
                        {"from", from},
                        {"to", to},
                        {"input", bridge::encode_tensor(act)},
                        {"centroid", bridge::encode_tensor(q, Shape{static_cast<int>(q.size())})}});
  }

  Tensor logits(const Tensor& image) override {
    return tensor_call({{"op", "logits"}, {"input", bridge::encode_tensor(image)}});
  }

  /// One raw request/response exchange; returns the response object.
  nlohmann::json call(nlohmann::json request) {
    std::lock_guard lock(mutex_);
    const std::int64_t id = next_id_++;
    request["id"] = id;
    request["version"] = bridge::kProtocolVersion;
    send_line(request.dump());
    const std::string line = read_line();
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::bridge, "bridge sent a non-JSON line");
    }
    require(resp.is_object() && resp.value("id", std::int64_t{-2}) == id, ErrorKind::bridge,
            "bridge response does not echo request id " + std::to_string(id));
    if (resp.value("status", "") != "ok")
      throw Error(ErrorKind::bridge, "bridge error: " + resp.value("error", std::string("unspecified")));
    return resp;
  }

 private:
  Tensor tensor_call(nlohmann::json request) {
    const auto resp = call(std::move(request));
    require(resp.contains("output"), ErrorKind::bridge, "bridge response lacks an output tensor");
    return bridge::decode_tensor(resp["output"]);
  }

  void spawn(std::vector<std::string> argv) {
    require(!argv.empty(), ErrorKind::bridge, "bridge command is empty");
    int to_child[2], from_child[2];
    require(pipe(to_child) == 0 && pipe(from_child) == 0, ErrorKind::bridge, "cannot create bridge pipes");
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&fa, from_child[1], STDOUT_FILENO);
    for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) posix_spawn_file_actions_addclose(&fa, fd);
    std::vector<char*> args;
    for (auto& a : argv) args.push_back(a.data());
    args.push_back(nullptr);
    const int rc = posix_spawnp(&pid_, args[0], &fa, nullptr, args.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    close(to_child[0]);
    close(from_child[1]);
    if (rc != 0) {
      close(to_child[1]);
      close(from_child[0]);
      pid_ = -1;
      throw Error(ErrorKind::bridge, "cannot start bridge '" + argv[0] + "': " + std::strerror(rc));
    }
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    signal(SIGPIPE, SIG_IGN);
  }

  void handshake() {
    try {
      const auto hello = call({{"op", "hello"}});
      require(hello.value("protocol", 0) == bridge::kProtocolVersion, ErrorKind::bridge,
              "bridge speaks an unsupported protocol version");
      input_shape_ = hello.at("input_shape").get<Shape>();
      taps_ = hello.at("tap_layers").get<std::vector<int>>();
      class_count_ = hello.value("class_count", 0);
      model_hash_ = hello.value("model_hash", std::string("bridge"));
      const auto shapes = call({{"op", "shapes"}});
      shapes_ = shapes.at("shapes").get<std::vector<Shape>>();
      require(!shapes_.empty(), ErrorKind::bridge, "bridge reported no layers");
      if (class_count_ == 0 && shapes_.back().size() == 1) class_count_ = shapes_.back()[0];
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::bridge, std::string("malformed handshake: ") + e.what());
    }
  }

  void send_line(const std::string& s) {
    std::string line = s + "\n";
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      const ssize_t n = write(write_fd_, p, left);
      if (n < 0 && errno == EINTR) continue;
      require(n > 0, ErrorKind::bridge, "bridge process closed its input");
      p += n;
      left -= static_cast<std::size_t>(n);
    }
  }

  std::string read_line() {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      require(buffer_.size() <= bridge::kMaxPayloadBytes * 2, ErrorKind::bridge, "bridge response line too long");
      char chunk[65536];
      const ssize_t n = read(read_fd_, chunk, sizeof(chunk));
      if (n < 0 && errno == EINTR) continue;
      require(n > 0, ErrorKind::bridge, "bridge process exited or closed its output");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void shutdown() noexcept {
    if (write_fd_ >= 0) close(write_fd_);
    if (read_fd_ >= 0) close(read_fd_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
    write_fd_ = read_fd_ = -1;
    pid_ = -1;
  }

  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::string buffer_;
  std::mutex mutex_;
  std::int64_t next_id_ = 1;
  Shape input_shape_;
  std::vector<int> taps_;
  std::vector<Shape> shapes_;
  int class_count_ = 0;
  std::string model_hash_;
};

}  // namespace vcc
