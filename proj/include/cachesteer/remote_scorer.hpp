#pragma once

/**
 * Client for the scorer wire protocol: newline-delimited JSON over a TCP
 * socket or the stdio pipes of a child process.
 *
 *   server hello   {"proto": 1, "dim": N}
 *   request        {"id": 7, "op": "embed_text"|"embed_image", "items": [...]}
 *   response       {"id": 7, "dim": N, "embeddings": [[...], ...]}
 *                | {"id": 7, "error": "..."}
 *
 * Image items are base64 of the file bytes. Returned vectors are
 * renormalized client-side.
 */

#include "cachesteer/scorer.hpp"

#include <nlohmann/json.hpp>

#include <arpa/inet.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>

namespace cachesteer {

inline std::string base64_encode(std::string_view in) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (std::uint32_t(static_cast<unsigned char>(in[i])) << 16) |
                            (std::uint32_t(static_cast<unsigned char>(in[i + 1])) << 8) |
                            std::uint32_t(static_cast<unsigned char>(in[i + 2]));
    out += {tbl[v >> 18], tbl[(v >> 12) & 63], tbl[(v >> 6) & 63], tbl[v & 63]};
  }
  if (const std::size_t rest = in.size() - i; rest) {
    std::uint32_t v = std::uint32_t(static_cast<unsigned char>(in[i])) << 16;
    if (rest == 2) v |= std::uint32_t(static_cast<unsigned char>(in[i + 1])) << 8;
    out += tbl[v >> 18];
    out += tbl[(v >> 12) & 63];
    out += rest == 2 ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

/// Line-oriented duplex byte stream over a pair of file descriptors.
class LineChannel {
 public:
  LineChannel(int read_fd, int write_fd, pid_t child = -1)
      : read_fd_(read_fd), write_fd_(write_fd), child_(child) {}
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;

  ~LineChannel() {
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    if (child_ > 0) {
      ::kill(child_, SIGTERM);
      ::waitpid(child_, nullptr, 0);
    }
  }

  /// host:port
  static std::unique_ptr<LineChannel> connect_tcp(const std::string& address) {
    auto colon = address.rfind(':');
    if (colon == std::string::npos) throw InputError("scorer address must be host:port, got " + address);
    const std::string host = address.substr(0, colon), port = address.substr(colon + 1);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
      throw BackendError("cannot resolve scorer address " + address + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (auto* p = res; p; p = p->ai_next) {
      fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw BackendError("cannot connect to scorer at " + address);
    return std::make_unique<LineChannel>(fd, fd);
  }

  /// Spawns `/bin/sh -c command` and talks over its stdin/stdout.
  static std::unique_ptr<LineChannel> spawn(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) throw BackendError("pipe() failed");
    pid_t pid = ::fork();
    if (pid < 0) throw BackendError("fork() failed");
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    return std::make_unique<LineChannel>(from_child[0], to_child[1], pid);
  }

  void send_line(const std::string& line) {
    std::string buf = line + '\n';
    std::size_t sent = 0;
    while (sent < buf.size()) {
      ssize_t n = ::send(write_fd_, buf.data() + sent, buf.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == ENOTSOCK) n = ::write(write_fd_, buf.data() + sent, buf.size() - sent);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw BackendError(std::string("scorer write failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  std::string recv_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw BackendError("scorer timed out");
      pollfd pfd{read_fd_, POLLIN, 0};
      int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) throw BackendError("scorer timed out");
      char chunk[65536];
      ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw BackendError("scorer closed the connection");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int read_fd_;
  int write_fd_;
  pid_t child_;
  std::string buffer_;
};

class RemoteScorer final : public Scorer {
 public:
  static constexpr int kProtocolVersion = 1;

  /// Endpoint forms: "host:port" or "exec:<shell command>".
  explicit RemoteScorer(const std::string& endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(60),
                        std::size_t max_batch = 512)
      : endpoint_(endpoint), timeout_(timeout), max_batch_(max_batch ? max_batch : 1) {
    channel_ = endpoint.starts_with("exec:") ? LineChannel::spawn(endpoint.substr(5))
                                             : LineChannel::connect_tcp(endpoint);
    nlohmann::json hello;
    try {
      hello = nlohmann::json::parse(channel_->recv_line(timeout_));
    } catch (const nlohmann::json::exception& e) {
      throw BackendError("scorer hello is not JSON: " + std::string(e.what()));
    }
    if (hello.value("proto", -1) != kProtocolVersion) throw BackendError("scorer speaks an unsupported protocol");
    dim_ = hello.value("dim", std::size_t{0});
    if (dim_ == 0) throw BackendError("scorer announced dim 0");
  }

  std::size_t dim() const override { return dim_; }
  std::string backend_id() const override { return "remote:" + endpoint_ + ":" + std::to_string(dim_); }

  std::vector<Embedding> embed_texts(std::span<const std::string> texts) override {
    for (const auto& t : texts) {
      if (t.empty()) throw InputError("cannot embed empty text");
    }
    return batched("embed_text", texts, Modality::text, [](const std::string& s) { return s; });
  }

  std::vector<Embedding> embed_images(std::span<const std::string> images) override {
    return batched("embed_image", images, Modality::image, [](const std::string& s) { return base64_encode(s); });
  }

 private:
  template <class Encode>
  std::vector<Embedding> batched(const char* op, std::span<const std::string> items, Modality m, Encode enc) {
    std::vector<Embedding> out;
    out.reserve(items.size());
    for (std::size_t start = 0; start < items.size(); start += max_batch_) {
      auto chunk = items.subspan(start, std::min(max_batch_, items.size() - start));
      nlohmann::json payload = nlohmann::json::array();
      for (const auto& s : chunk) payload.push_back(enc(s));
      auto got = request(op, payload, m);
      std::move(got.begin(), got.end(), std::back_inserter(out));
    }
    return out;
  }

  std::vector<Embedding> request(const char* op, const nlohmann::json& items, Modality m) {
    std::lock_guard lock(mu_);
    const std::int64_t id = next_id_++;
    count_request();
    // partial UTF-8 sequences (byte-level tokens) cannot travel in JSON strings; they become U+FFFD
    channel_->send_line(nlohmann::json{{"id", id}, {"op", op}, {"items", items}}.dump(
        -1, ' ', false, nlohmann::json::error_handler_t::replace));
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(channel_->recv_line(timeout_));
    } catch (const nlohmann::json::exception& e) {
      throw BackendError("scorer response is not JSON: " + std::string(e.what()));
    }
    if (resp.value("id", std::int64_t{-1}) != id) throw BackendError("scorer response id mismatch");
    if (resp.contains("error")) throw BackendError("scorer error: " + resp["error"].dump());
    if (!resp.contains("embeddings")) throw BackendError("scorer response lacks embeddings");
    const auto& embs = resp["embeddings"];
    if (!embs.is_array() || embs.size() != items.size()) throw BackendError("scorer returned wrong batch size");
    std::vector<Embedding> out;
    out.reserve(embs.size());
    for (const auto& row : embs) {
      Embedding e{{}, m, 1.0};
      try {
        e.values = row.get<std::vector<float>>();
      } catch (const nlohmann::json::exception&) {
        throw BackendError("scorer returned a malformed embedding row");
      }
      if (e.dim() != dim_) throw BackendError("scorer returned wrong dimension");
      normalize(e);
      out.push_back(std::move(e));
    }
    return out;
  }

  std::string endpoint_;
  std::chrono::milliseconds timeout_;
  std::size_t max_batch_;
  std::unique_ptr<LineChannel> channel_;
  std::size_t dim_ = 0;
  std::mutex mu_;
  std::int64_t next_id_ = 1;
};

}  // namespace cachesteer
