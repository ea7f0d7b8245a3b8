#include "repose/common.hpp"

#include <charconv>

namespace repose {

std::string fmt_shortest(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace repose
