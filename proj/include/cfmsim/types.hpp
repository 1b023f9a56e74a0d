#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cfmsim {

using GuestAddr = std::uint64_t;
using PageIndex = std::uint64_t;

// Hard fault of the simulation itself: double free, out-of-range access,
// corrupted kernel structures. Never raised on a normal syscall path.
struct SimFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed scenario / policy / profile documents. The message carries the
// document position (JSON pointer or byte offset).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Placement { Default, Isolated };
enum class OpenMode { ReadOnly, WriteOnly, ReadWrite };
enum class IoDir { Read, Write };

// Guest-visible negative syscall results.
inline constexpr std::int64_t kErrNoEnt = -2;
inline constexpr std::int64_t kErrSrch = -3;
inline constexpr std::int64_t kErrBadFd = -9;
inline constexpr std::int64_t kErrNoMem = -12;
inline constexpr std::int64_t kErrAccess = -13;
inline constexpr std::int64_t kErrExists = -17;
inline constexpr std::int64_t kErrXDev = -18;
inline constexpr std::int64_t kErrNotDir = -20;
inline constexpr std::int64_t kErrInval = -22;
inline constexpr std::int64_t kErrNFile = -23;
// The out-of-band blocker overwrites results with plain -1, which keeps
// monitor-denied calls distinguishable from kernel-internal failures.
inline constexpr std::int64_t kBlockedResult = -1;

// A filesystem scope: either the host (VM) tree or one container's
// overlay-merged tree. Scoped path strings read "host:/x" or "<cid>:/x".
struct FsScope {
  std::string container;  // empty = host

  bool is_host() const { return container.empty(); }
  static FsScope host() { return FsScope{}; }
  static FsScope in(std::string id) { return FsScope{std::move(id)}; }

  std::string qualify(const std::string& path) const {
    return (is_host() ? std::string("host") : container) + ":" + path;
  }
  bool operator==(const FsScope&) const = default;
};

inline FsScope parse_scope(const std::string& s) {
  if (s == "host") return FsScope::host();
  return FsScope::in(s);
}

// Splits "web:/www/a.html" into scope and path. A bare "/path" is host.
inline std::pair<FsScope, std::string> split_scoped_path(const std::string& s) {
  auto colon = s.find(':');
  if (colon == std::string::npos || s.empty() || s[0] == '/')
    return {FsScope::host(), s};
  return {parse_scope(s.substr(0, colon)), s.substr(colon + 1)};
}

}  // namespace cfmsim
