#include "pulsegrid/common.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <system_error>

namespace pulsegrid {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
  uint64_t h = fnv1a64(tag.data(), tag.size(), seed ^ 0xcbf29ce484222325ull);
  uint64_t state = h;
  state ^= 0x9e3779b97f4a7c15ull * (a + 1);
  splitmix64(state);
  state ^= 0xc2b2ae3d27d4eb4full * (b + 1);
  splitmix64(state);
  return splitmix64(state);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (hi < lo) throw Error("uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<int64_t>(x % span);
}

double Rng::uniform_real() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform_real() - 1.0;
    v = 2.0 * uniform_real() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  have_spare_ = true;
  return u * m;
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<char> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path.string());
  in.seekg(0, std::ios::end);
  std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<size_t>(len));
  if (len > 0) in.read(buf.data(), len);
  if (!in) throw Error("short read: " + path.string());
  return buf;
}

void atomic_write_file(const std::filesystem::path& path, const void* data, size_t len) {
  namespace fs = std::filesystem;
  fs::path dir = path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open file for write: " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!out) throw Error("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void atomic_write_file(const std::filesystem::path& path, const std::string& text) {
  atomic_write_file(path, text.data(), text.size());
}

}  // namespace pulsegrid
