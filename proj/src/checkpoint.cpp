#include <cmath>
#include <cstring>

#include "can/binio.hpp"
#include "can/network.hpp"

namespace can {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'N', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxRank = 8;

}  // namespace

void save_checkpoint(const std::string& path, const NetParams& p) {
  bin::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u64(p.spec.hash());
  for (const Param* q : p.params()) {
    w.u32(std::uint32_t(q->name.size()));
    w.bytes(q->name.data(), q->name.size());
    w.u32(std::uint32_t(q->shape.size()));
    for (std::size_t d : q->shape) w.u64(d);
    for (real v : q->value) w.f64(double(v));
  }
  bin::write_file(path, w.take());
}

void load_checkpoint(const std::string& path, NetParams& p) {
  const std::vector<std::uint8_t> bytes = bin::read_file(path);
  bin::Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected CANC", 0);
  r.str(4, "magic");
  const std::size_t version_at = r.offset();
  if (const std::uint32_t v = r.u32("version"); v != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  if (const std::uint64_t h = r.u64("spec hash"); h != p.spec.hash()) {
    throw ConfigError("checkpoint '" + path + "' was written for a different network than '" + p.spec.name + "'");
  }

  // Decode everything before touching `p`, so a bad file leaves it unchanged.
  const std::vector<Param*> params = p.params();
  std::vector<std::vector<real>> values(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param& q = *params[i];
    if (r.done()) throw FormatError("checkpoint ends before bundle '" + q.name + "'", r.offset());
    const std::size_t name_at = r.offset();
    const std::uint32_t len = r.u32("name length");
    if (len > kMaxName) throw FormatError("implausible name length " + std::to_string(len), name_at);
    if (const std::string name = r.str(len, "name"); name != q.name) {
      throw FormatError("expected bundle '" + q.name + "', found '" + name + "'", name_at);
    }
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("rank");
    if (rank > kMaxRank) throw FormatError("implausible rank " + std::to_string(rank), rank_at);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = std::size_t(r.u64("dims"));
    if (shape != q.shape) throw FormatError("shape mismatch for '" + q.name + "'", rank_at);
    values[i].resize(q.size());
    for (real& v : values[i]) {
      const std::size_t at = r.offset();
      const double d = r.f64("values");
      if (!std::isfinite(d)) throw FormatError("non-finite value in '" + q.name + "'", at);
      v = real(d);
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after the last bundle", r.offset());
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = std::move(values[i]);
}

}  // namespace can
