// Copyright 2026 The jneeg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Socket endpoint for a Rig: WebSocket (RFC 6455) for control JSON and
// binary data messages, and plain HTTP `GET /status` on the same port.
//
// Each WebSocket connection gets a subscriber queue and one worker thread.
// The worker runs control requests (which may block while the producer
// works) and forwards queued data; socket I/O itself stays on the io
// thread's strand.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "jneeg/rig.hpp"

namespace jneeg::net {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

inline constexpr unsigned short kDefaultPort = 9271;
inline constexpr const char* kPortEnv = "JNEEG_PORT";

/// Port from JNEEG_PORT, else the default.
inline unsigned short default_port() {
  if (const char* env = std::getenv(kPortEnv)) {
    try {
      const int p = std::stoi(env);
      if (p >= 0 && p <= 65535) return static_cast<unsigned short>(p);
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::config, std::string(kPortEnv) + " is not a valid port: " + env);
  }
  return kDefaultPort;
}

class WsSession;

/// Live WebSocket sessions and their worker threads, shared with the
/// sessions so it outlives whichever side goes first.
struct SessionTracker {
  std::mutex mu;
  std::condition_variable cv;
  int active_workers = 0;
  std::vector<std::weak_ptr<WsSession>> sessions;
};

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket socket, Rig& rig, std::shared_ptr<SessionTracker> tracker)
      : ws_(std::move(socket)), rig_(rig), tracker_(std::move(tracker)) {}

  ~WsSession() {
    if (worker_.joinable()) {
      if (worker_.get_id() == std::this_thread::get_id()) {
        worker_.detach();
      } else {
        worker_.join();
      }
    }
  }

  /// Asks the worker to finish; it unsubscribes and reports to the tracker.
  void request_close() {
    closing_ = true;
    if (sub_) sub_->close();
  }

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

 private:
  struct Outgoing {
    Payload bytes;
    bool text = false;
  };

  void on_accept(beast::error_code ec) {
    if (ec) return;
    sub_ = rig_.subscribe();
    {
      std::lock_guard lk(tracker_->mu);
      ++tracker_->active_workers;
      tracker_->sessions.push_back(weak_from_this());
    }
    worker_ = std::thread([self = shared_from_this()] { self->work(); });
    do_read();
  }

  void do_read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      close();
      return;
    }
    std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    {
      std::lock_guard lk(mu_);
      controls_.push_back(std::move(text));
    }
    do_read();
  }

  /// Worker thread: control requests first, then data.
  void work() {
    while (!closing_) {
      std::deque<std::string> batch;
      {
        std::lock_guard lk(mu_);
        batch.swap(controls_);
      }
      for (const auto& text : batch) send(handle_control(text), true);
      if (inflight_ >= kMaxInflight) {
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
        continue;
      }
      if (auto p = sub_->pop(std::chrono::milliseconds(20))) send(std::move(*p), false);
    }
    rig_.unsubscribe(sub_);
    // Last touch of the rig or the tracker from this thread.
    std::lock_guard lk(tracker_->mu);
    --tracker_->active_workers;
    tracker_->cv.notify_all();
  }

  Payload handle_control(const std::string& text) {
    std::string reply;
    try {
      const auto msg = nlohmann::json::parse(text);
      if (msg.is_object() && msg.value("cmd", "") == "impedance") {
        reply = rig_.measure_impedance_blocking(msg, std::chrono::seconds(30)).dump();
      } else {
        reply = rig_.control(msg).dump();
      }
    } catch (const nlohmann::json::exception&) {
      reply = rig_.control_text(text);
    }
    return std::make_shared<const std::vector<std::uint8_t>>(reply.begin(), reply.end());
  }

  void send(Payload p, bool text) {
    ++inflight_;
    asio::post(ws_.get_executor(), [self = shared_from_this(), p = std::move(p), text]() mutable {
      self->out_.push_back({std::move(p), text});
      if (self->out_.size() == 1) self->do_write();
    });
  }

  void do_write() {
    ws_.text(out_.front().text);
    ws_.binary(!out_.front().text);
    ws_.async_write(asio::buffer(*out_.front().bytes),
                    beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    out_.pop_front();
    --inflight_;
    if (ec) {
      close();
      return;
    }
    if (!out_.empty()) do_write();
  }

  void close() { request_close(); }

  static constexpr int kMaxInflight = 8;

  websocket::stream<beast::tcp_stream> ws_;
  Rig& rig_;
  std::shared_ptr<SessionTracker> tracker_;
  beast::flat_buffer buffer_;
  std::shared_ptr<Subscriber> sub_;
  std::thread worker_;
  std::mutex mu_;
  std::deque<std::string> controls_;
  std::deque<Outgoing> out_;
  std::atomic<int> inflight_{0};
  std::atomic<bool> closing_{false};
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, Rig& rig, std::shared_ptr<SessionTracker> tracker)
      : stream_(std::move(socket)), rig_(rig), tracker_(std::move(tracker)) {}

  void run() {
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

 private:
  void on_read(beast::error_code ec, std::size_t) {
    if (ec) return;
    if (websocket::is_upgrade(req_)) {
      stream_.expires_never();
      std::make_shared<WsSession>(stream_.release_socket(), rig_, tracker_)->run(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(req_.version());
    res->set(http::field::server, "jneeg");
    res->keep_alive(false);
    if (req_.method() == http::verb::get && req_.target() == "/status") {
      auto status = rig_.control({{"cmd", "status"}});
      status.erase("cmd");
      status.erase("ok");
      res->result(http::status::ok);
      res->set(http::field::content_type, "application/json");
      res->body() = status.dump();
    } else {
      res->result(http::status::not_found);
      res->set(http::field::content_type, "text/plain");
      res->body() = "not found\n";
    }
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ignored;
      self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
    });
  }

  beast::tcp_stream stream_;
  Rig& rig_;
  std::shared_ptr<SessionTracker> tracker_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

/// Listening endpoint bound to one Rig. Port 0 picks a free port.
class Server {
 public:
  Server(Rig& rig, unsigned short port, const std::string& address = "0.0.0.0")
      : rig_(rig), acceptor_(ioc_) {
    const tcp::endpoint ep(asio::ip::make_address(address), port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(asio::socket_base::max_listen_connections);
    port_ = acceptor_.local_endpoint().port();
  }

  ~Server() { stop(); }

  void start() {
    do_accept();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  /// Closes the listener and every session; returns once no worker can
  /// touch the rig any more.
  void stop() {
    if (!thread_.joinable()) return;
    asio::post(ioc_, [this] {
      beast::error_code ec;
      acceptor_.close(ec);
    });
    std::vector<std::shared_ptr<WsSession>> live;
    {
      std::lock_guard lk(tracker_->mu);
      for (auto& w : tracker_->sessions) {
        if (auto s = w.lock()) live.push_back(std::move(s));
      }
    }
    for (auto& s : live) s->request_close();
    live.clear();
    {
      std::unique_lock lk(tracker_->mu);
      tracker_->cv.wait(lk, [&] { return tracker_->active_workers == 0; });
    }
    ioc_.stop();
    thread_.join();
  }

  unsigned short port() const noexcept { return port_; }

 private:
  void do_accept() {
    acceptor_.async_accept(asio::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<HttpSession>(std::move(socket), rig_, tracker_)->run();
      do_accept();
    });
  }

  Rig& rig_;
  std::shared_ptr<SessionTracker> tracker_ = std::make_shared<SessionTracker>();
  asio::io_context ioc_;
  tcp::acceptor acceptor_;
  std::thread thread_;
  unsigned short port_ = 0;
};

}  // namespace jneeg::net
