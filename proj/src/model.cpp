#include "capmem/model.hpp"

#include <cstdio>

namespace capmem {

std::string format_param_count(int64_t count) {
  char buf[32];
  if (count >= 1000000)
    std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(count) / 1e6);
  else if (count >= 1000)
    std::snprintf(buf, sizeof(buf), "%.2fk", static_cast<double>(count) / 1e3);
  else
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(count));
  return buf;
}

}  // namespace capmem
