#pragma once

#include <netinet/in.h>

#include <chrono>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>

namespace rimbus {

/// IPv4 address:port value type.
struct SocketAddress {
  uint32_t ip_be = 0;  // network byte order
  uint16_t port = 0;   // host byte order

  static SocketAddress loopback(uint16_t port);
  static SocketAddress parse(const std::string& ip, uint16_t port);  // throws ConfigError
  static SocketAddress from(const sockaddr_in& sa);

  sockaddr_in to_sockaddr() const;
  std::string to_string() const;
  bool valid() const { return port != 0; }

  friend bool operator==(const SocketAddress&, const SocketAddress&) = default;
  friend auto operator<=>(const SocketAddress&, const SocketAddress&) = default;
};

/// Owning file descriptor with move semantics.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  Fd& operator=(Fd&& other) noexcept;
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd();

  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release();
  void reset(int fd = -1);

 private:
  int fd_ = -1;
};

// UDP helpers. All throw rimbus::Error on OS failure unless noted.

/// Creates a UDP socket bound to addr (port 0 picks an ephemeral port).
/// Requests a large receive buffer (SO_RCVBUFFORCE when permitted).
Fd udp_bind(const SocketAddress& addr, bool reuse = false);

/// Binds INADDR_ANY:port with SO_REUSEADDR/SO_REUSEPORT and joins the
/// multicast group on the loopback interface.
Fd udp_join_multicast(const std::string& group, uint16_t port);

/// Configures fd to send multicast over loopback with IP_MULTICAST_LOOP.
void udp_enable_multicast_tx(int fd);

SocketAddress local_address(int fd);

void set_recv_timeout(int fd, std::chrono::milliseconds timeout);

// TCP helpers.

Fd tcp_listen(uint16_t port, int backlog = 16);
/// Blocking connect with timeout; returns invalid Fd on failure/timeout.
Fd tcp_connect(const SocketAddress& peer, std::chrono::milliseconds timeout);
void tcp_tune(int fd);  // TCP_NODELAY + SO_KEEPALIVE

/// Reads exactly n bytes; false on EOF/error/timeout.
bool read_exact(int fd, uint8_t* buf, size_t n);
/// Writes all n bytes; false on error.
bool write_all(int fd, const uint8_t* buf, size_t n);

}  // namespace rimbus
