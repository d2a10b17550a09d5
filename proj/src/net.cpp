#include "rimbus/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <fmt/core.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "rimbus/errors.hpp"

namespace rimbus {

namespace {

[[noreturn]] void throw_errno(const std::string& what) {
  throw Error(fmt::format("{}: {}", what, std::strerror(errno)));
}

void request_big_buffers(int fd) {
  // 64 MiB absorbs a full large-message fragment burst. SO_RCVBUFFORCE needs
  // CAP_NET_ADMIN; fall back to the rmem_max-capped variant silently.
  int want = 64 << 20;
  if (setsockopt(fd, SOL_SOCKET, SO_RCVBUFFORCE, &want, sizeof(want)) < 0)
    setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &want, sizeof(want));
  if (setsockopt(fd, SOL_SOCKET, SO_SNDBUFFORCE, &want, sizeof(want)) < 0)
    setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &want, sizeof(want));
}

}  // namespace

SocketAddress SocketAddress::loopback(uint16_t port) {
  SocketAddress a;
  a.ip_be = htonl(INADDR_LOOPBACK);
  a.port = port;
  return a;
}

SocketAddress SocketAddress::parse(const std::string& ip, uint16_t port) {
  SocketAddress a;
  in_addr addr{};
  if (inet_pton(AF_INET, ip.c_str(), &addr) != 1)
    throw ConfigError(fmt::format("invalid IPv4 address '{}'", ip));
  a.ip_be = addr.s_addr;
  a.port = port;
  return a;
}

SocketAddress SocketAddress::from(const sockaddr_in& sa) {
  SocketAddress a;
  a.ip_be = sa.sin_addr.s_addr;
  a.port = ntohs(sa.sin_port);
  return a;
}

sockaddr_in SocketAddress::to_sockaddr() const {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = ip_be;
  sa.sin_port = htons(port);
  return sa;
}

std::string SocketAddress::to_string() const {
  char buf[INET_ADDRSTRLEN] = {};
  in_addr addr{};
  addr.s_addr = ip_be;
  inet_ntop(AF_INET, &addr, buf, sizeof(buf));
  return fmt::format("{}:{}", buf, port);
}

Fd& Fd::operator=(Fd&& other) noexcept {
  if (this != &other) {
    reset(other.fd_);
    other.fd_ = -1;
  }
  return *this;
}

Fd::~Fd() { reset(); }

int Fd::release() {
  int fd = fd_;
  fd_ = -1;
  return fd;
}

void Fd::reset(int fd) {
  if (fd_ >= 0) ::close(fd_);
  fd_ = fd;
}

Fd udp_bind(const SocketAddress& addr, bool reuse) {
  Fd fd(::socket(AF_INET, SOCK_DGRAM, 0));
  if (!fd.valid()) throw_errno("socket(udp)");
  if (reuse) {
    int one = 1;
    setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  }
  request_big_buffers(fd.get());
  sockaddr_in sa = addr.to_sockaddr();
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0)
    throw_errno(fmt::format("bind(udp {})", addr.to_string()));
  return fd;
}

Fd udp_join_multicast(const std::string& group, uint16_t port) {
  Fd fd(::socket(AF_INET, SOCK_DGRAM, 0));
  if (!fd.valid()) throw_errno("socket(udp)");
  int one = 1;
  setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
#ifdef SO_REUSEPORT
  setsockopt(fd.get(), SOL_SOCKET, SO_REUSEPORT, &one, sizeof(one));
#endif
  request_big_buffers(fd.get());

  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(INADDR_ANY);
  sa.sin_port = htons(port);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0)
    throw_errno(fmt::format("bind(mcast :{})", port));

  ip_mreqn mreq{};
  if (inet_pton(AF_INET, group.c_str(), &mreq.imr_multiaddr) != 1)
    throw ConfigError(fmt::format("invalid multicast group '{}'", group));
  mreq.imr_address.s_addr = htonl(INADDR_LOOPBACK);
  mreq.imr_ifindex = 1;  // loopback
  if (setsockopt(fd.get(), IPPROTO_IP, IP_ADD_MEMBERSHIP, &mreq, sizeof(mreq)) < 0)
    throw_errno(fmt::format("IP_ADD_MEMBERSHIP({})", group));
  return fd;
}

void udp_enable_multicast_tx(int fd) {
  ip_mreqn txif{};
  txif.imr_address.s_addr = htonl(INADDR_LOOPBACK);
  txif.imr_ifindex = 1;
  if (setsockopt(fd, IPPROTO_IP, IP_MULTICAST_IF, &txif, sizeof(txif)) < 0)
    throw_errno("IP_MULTICAST_IF");
  int loop = 1;
  setsockopt(fd, IPPROTO_IP, IP_MULTICAST_LOOP, &loop, sizeof(loop));
}

SocketAddress local_address(int fd) {
  sockaddr_in sa{};
  socklen_t len = sizeof(sa);
  if (getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len) < 0)
    throw_errno("getsockname");
  return SocketAddress::from(sa);
}

void set_recv_timeout(int fd, std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = timeout.count() / 1000;
  tv.tv_usec = (timeout.count() % 1000) * 1000;
  setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
}

Fd tcp_listen(uint16_t port, int backlog) {
  Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
  if (!fd.valid()) throw_errno("socket(tcp)");
  int one = 1;
  setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in sa = SocketAddress::loopback(port).to_sockaddr();
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0)
    throw_errno(fmt::format("bind(tcp :{})", port));
  if (::listen(fd.get(), backlog) < 0) throw_errno("listen");
  return fd;
}

Fd tcp_connect(const SocketAddress& peer, std::chrono::milliseconds timeout) {
  Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
  if (!fd.valid()) return {};
  int flags = fcntl(fd.get(), F_GETFL, 0);
  fcntl(fd.get(), F_SETFL, flags | O_NONBLOCK);
  sockaddr_in sa = peer.to_sockaddr();
  int rc = ::connect(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
  if (rc < 0 && errno != EINPROGRESS) return {};
  if (rc < 0) {
    pollfd pfd{fd.get(), POLLOUT, 0};
    if (::poll(&pfd, 1, int(timeout.count())) <= 0) return {};
    int err = 0;
    socklen_t len = sizeof(err);
    getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) return {};
  }
  fcntl(fd.get(), F_SETFL, flags);
  return fd;
}

void tcp_tune(int fd) {
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  setsockopt(fd, SOL_SOCKET, SO_KEEPALIVE, &one, sizeof(one));
}

bool read_exact(int fd, uint8_t* buf, size_t n) {
  size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) return false;
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    got += size_t(r);
  }
  return true;
}

bool write_all(int fd, const uint8_t* buf, size_t n) {
  size_t sent = 0;
  while (sent < n) {
    ssize_t r = ::send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    sent += size_t(r);
  }
  return true;
}

}  // namespace rimbus
