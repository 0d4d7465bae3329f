#include "agcm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "agcm/bytes.hpp"
#include "agcm/error.hpp"

namespace agcm {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
  if (height < 32 || width < 32) throw ConfigError("scene dims must be at least 32x32");
  if (objects_min < 1 || objects_max > 4 || objects_min > objects_max) {
    throw ConfigError("scene object count must lie in [1, 4]");
  }
  if (!(extent_min > 0.0) || extent_max > 0.5 || extent_min > extent_max) {
    throw ConfigError("object extents must satisfy 0 < min <= max <= 0.5");
  }
  if (!(coverage_min >= 0.0) || coverage_max > 1.0 || coverage_min >= coverage_max) {
    throw ConfigError("coverage band must satisfy 0 <= min < max <= 1");
  }
  if (!disks && !rects && !triangles) throw ConfigError("at least one shape kind must be enabled");
}

namespace {

constexpr double kTau = 6.283185307179586;

void paint_background(Tensor& image, Rng& rng) {
  const std::int64_t h = image.dim(1), w = image.dim(2);
  double base[3], stripe_amp[3];
  for (auto& b : base) b = rng.uniform(0.08, 0.38);
  // Low-frequency lattice offsets, bilinearly interpolated.
  constexpr int kGrid = 4;
  double lattice[3][kGrid + 1][kGrid + 1];
  for (auto& channel : lattice) {
    for (auto& row : channel) {
      for (auto& v : row) v = rng.uniform(-0.08, 0.08);
    }
  }
  // A couple of faint diagonal stripes as distractor texture.
  const double fx = rng.uniform(0.02, 0.12), fy = rng.uniform(0.02, 0.12);
  const double phase = rng.uniform(0.0, kTau);
  for (auto& a : stripe_amp) a = rng.uniform(0.01, 0.05);

  auto& data = image.mutable_data();
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      const double gy = static_cast<double>(y) / static_cast<double>(h - 1) * kGrid;
      const int y0 = std::min(static_cast<int>(gy), kGrid - 1);
      const double ty = gy - y0;
      for (std::int64_t x = 0; x < w; ++x) {
        const double gx = static_cast<double>(x) / static_cast<double>(w - 1) * kGrid;
        const int x0 = std::min(static_cast<int>(gx), kGrid - 1);
        const double tx = gx - x0;
        const double lat = (1 - ty) * ((1 - tx) * lattice[c][y0][x0] + tx * lattice[c][y0][x0 + 1]) +
                           ty * ((1 - tx) * lattice[c][y0 + 1][x0] + tx * lattice[c][y0 + 1][x0 + 1]);
        const double stripe =
            stripe_amp[c] * std::sin(kTau * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) + phase);
        const double v = base[c] + lat + stripe;
        data[static_cast<std::size_t>((c * h + y) * w + x)] = std::clamp(v, 0.0, 0.55);
      }
    }
  }
}

enum class ShapeKind { Disk, Rect, Triangle };

struct Placed {
  ShapeKind kind;
  double cx, cy, extent;
  double vx[3], vy[3];  // triangle vertices
  double rx, ry;        // rect half extents
};

bool inside(const Placed& s, double px, double py) {
  switch (s.kind) {
    case ShapeKind::Disk: {
      const double dx = px - s.cx, dy = py - s.cy;
      return dx * dx + dy * dy <= s.extent * s.extent;
    }
    case ShapeKind::Rect:
      return std::abs(px - s.cx) <= s.rx && std::abs(py - s.cy) <= s.ry;
    case ShapeKind::Triangle: {
      auto side = [&](int a, int b) {
        return (s.vx[b] - s.vx[a]) * (py - s.vy[a]) - (s.vy[b] - s.vy[a]) * (px - s.vx[a]);
      };
      const double d0 = side(0, 1), d1 = side(1, 2), d2 = side(2, 0);
      const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(has_neg && has_pos);
    }
  }
  return false;
}

void rasterize(Tensor& image, Tensor& mask, const Placed& s, const double color[3]) {
  const std::int64_t h = image.dim(1), w = image.dim(2);
  const double reach = s.extent + 1.0;
  const std::int64_t y_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(s.cy - reach));
  const std::int64_t y_hi = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(s.cy + reach));
  const std::int64_t x_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(s.cx - reach));
  const std::int64_t x_hi = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(s.cx + reach));
  auto& img = image.mutable_data();
  auto& msk = mask.mutable_data();
  for (std::int64_t y = y_lo; y <= y_hi; ++y) {
    for (std::int64_t x = x_lo; x <= x_hi; ++x) {
      if (!inside(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
      msk[static_cast<std::size_t>(y * w + x)] = 1.0;
      for (std::int64_t c = 0; c < 3; ++c) {
        img[static_cast<std::size_t>((c * h + y) * w + x)] = color[c];
      }
    }
  }
}

}  // namespace

SyntheticScene gen_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Rng rng(seed);
  const std::int64_t h = spec.height, w = spec.width;
  const double side = static_cast<double>(std::min(h, w));

  std::vector<ShapeKind> kinds;
  if (spec.disks) kinds.push_back(ShapeKind::Disk);
  if (spec.rects) kinds.push_back(ShapeKind::Rect);
  if (spec.triangles) kinds.push_back(ShapeKind::Triangle);

  for (int attempt = 0; attempt < 64; ++attempt) {
    SyntheticScene scene;
    scene.seed = seed;
    scene.image = Tensor::zeros({3, h, w});
    scene.mask = Tensor::zeros({1, h, w});
    paint_background(scene.image, rng);

    scene.objects = static_cast<int>(rng.uniform_int(spec.objects_min, spec.objects_max));
    bool placed_all = true;
    for (int obj = 0; obj < scene.objects; ++obj) {
      Placed s;
      s.kind = kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(kinds.size()) - 1))];
      s.extent = rng.uniform(spec.extent_min, spec.extent_max) * side;

      bool placed = false;
      for (int retry = 0; retry < 64 && !placed; ++retry) {
        const double margin = s.extent;
        if (2.0 * margin > static_cast<double>(w) || 2.0 * margin > static_cast<double>(h)) break;
        s.cx = rng.uniform(margin, static_cast<double>(w) - margin);
        s.cy = rng.uniform(margin, static_cast<double>(h) - margin);
        if (s.kind == ShapeKind::Rect) {
          s.rx = s.extent * rng.uniform(0.6, 1.0);
          s.ry = s.extent * rng.uniform(0.6, 1.0);
        } else if (s.kind == ShapeKind::Triangle) {
          double area = 0.0;
          for (int tries = 0; tries < 16 && area < 0.5 * s.extent * s.extent; ++tries) {
            for (int vtx = 0; vtx < 3; ++vtx) {
              const double angle = rng.uniform(0.0, kTau);
              const double radius = s.extent * rng.uniform(0.6, 1.0);
              s.vx[vtx] = s.cx + radius * std::cos(angle);
              s.vy[vtx] = s.cy + radius * std::sin(angle);
            }
            area = 0.5 * std::abs((s.vx[1] - s.vx[0]) * (s.vy[2] - s.vy[0]) -
                                  (s.vx[2] - s.vx[0]) * (s.vy[1] - s.vy[0]));
          }
          if (area < 0.5 * s.extent * s.extent) continue;
        }
        placed = true;
      }
      if (!placed) {
        placed_all = false;
        break;
      }

      double color[3];
      const std::int64_t dominant = rng.uniform_int(0, 2);
      for (std::int64_t c = 0; c < 3; ++c) {
        color[c] = c == dominant ? rng.uniform(0.78, 0.98) : rng.uniform(0.45, 0.9);
      }
      rasterize(scene.image, scene.mask, s, color);
    }
    if (!placed_all) continue;

    double coverage = 0.0;
    for (const double v : scene.mask.data()) coverage += v;
    coverage /= static_cast<double>(h * w);
    if (coverage >= spec.coverage_min && coverage <= spec.coverage_max) {
      return scene;
    }
  }
  throw ConfigError("gen_scene: could not satisfy the scene spec after 64 attempts (seed " +
                    std::to_string(seed) + ")");
}

// --- PNM ---

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw IoError("read failure on '" + path + "'");
  return data;
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out.good()) throw IoError("write failure on '" + path + "'");
}

std::uint8_t quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0));
}

std::string pnm_encode(const Tensor& t, bool color) {
  const std::int64_t channels = color ? 3 : 1;
  if (t.rank() != 3 || t.dim(0) != channels) {
    throw ShapeError(std::string(color ? "ppm" : "pgm") + " writer expects [" +
                     std::to_string(channels) + " x h x w], got " + shape_str(t.shape()));
  }
  const std::int64_t h = t.dim(1), w = t.dim(2);
  std::string out = color ? "P6\n" : "P5\n";
  out += std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(channels * h * w));
  const auto& v = t.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < channels; ++c) {
        out.push_back(static_cast<char>(quantize(v[static_cast<std::size_t>((c * h + y) * w + x)])));
      }
    }
  }
  return out;
}

struct PnmParser {
  const std::string& buf;
  const std::string& path;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("'" + path + "': " + what + " at byte offset " + std::to_string(pos));
  }
  int peek() const { return pos < buf.size() ? static_cast<unsigned char>(buf[pos]) : -1; }
  void skip_space_and_comments() {
    while (pos < buf.size()) {
      const char c = buf[pos];
      if (c == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }
  std::int64_t parse_int() {
    skip_space_and_comments();
    if (pos >= buf.size() || !std::isdigit(peek())) fail("expected an integer");
    std::int64_t v = 0;
    while (pos < buf.size() && std::isdigit(peek())) {
      v = v * 10 + (buf[pos] - '0');
      if (v > (1 << 30)) fail("integer out of range");
      ++pos;
    }
    return v;
  }
};

Tensor pnm_decode(const std::string& path, bool color) {
  const std::string data = read_file(path);
  PnmParser p{data, path};
  const char* magic = color ? "P6" : "P5";
  if (data.size() < 2 || data[0] != magic[0] || data[1] != magic[1]) {
    p.fail(std::string("expected magic '") + magic + "'");
  }
  p.pos = 2;
  const std::int64_t w = p.parse_int();
  const std::int64_t h = p.parse_int();
  const std::int64_t maxval = p.parse_int();
  if (w <= 0 || h <= 0) p.fail("non-positive dimensions");
  if (maxval != 255) p.fail("unsupported maxval " + std::to_string(maxval) + " (need 255)");
  if (p.pos >= data.size() || !(data[p.pos] == '\n' || data[p.pos] == ' ' || data[p.pos] == '\t' ||
                                data[p.pos] == '\r')) {
    p.fail("expected single whitespace after maxval");
  }
  ++p.pos;
  const std::int64_t channels = color ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(channels * h * w);
  if (data.size() - p.pos < need) {
    p.fail("truncated body: need " + std::to_string(need) + " bytes, have " +
           std::to_string(data.size() - p.pos));
  }
  Tensor t(Shape{channels, h, w});
  auto& v = t.mutable_data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (std::int64_t c = 0; c < channels; ++c) {
        const auto byte = static_cast<unsigned char>(data[p.pos++]);
        v[static_cast<std::size_t>((c * h + y) * w + x)] = static_cast<double>(byte) / 255.0;
      }
    }
  }
  return t;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& rgb) { write_file(path, pnm_encode(rgb, true)); }
Tensor read_ppm(const std::string& path) { return pnm_decode(path, true); }
void write_pgm(const std::string& path, const Tensor& gray) { write_file(path, pnm_encode(gray, false)); }
Tensor read_pgm(const std::string& path) { return pnm_decode(path, false); }

std::vector<Sample> load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir + "' does not exist");
  std::map<std::string, std::string> images, masks;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > 8 && name.rfind("img_", 0) == 0 && name.ends_with(".ppm")) {
      images[name.substr(4, name.size() - 8)] = entry.path().string();
    } else if (name.size() > 8 && name.rfind("msk_", 0) == 0 && name.ends_with(".pgm")) {
      masks[name.substr(4, name.size() - 8)] = entry.path().string();
    }
  }
  std::vector<std::string> unmatched;
  for (const auto& [id, path] : images) {
    if (!masks.count(id)) unmatched.push_back(path);
  }
  for (const auto& [id, path] : masks) {
    if (!images.count(id)) unmatched.push_back(path);
  }
  if (!unmatched.empty()) {
    std::string msg = "unmatched image/mask pairs in '" + dir + "':";
    for (const auto& p : unmatched) msg += " " + p;
    throw DataError(msg);
  }
  std::vector<Sample> out;
  out.reserve(images.size());
  for (const auto& [id, path] : images) {
    Sample s;
    s.id = id;
    s.image = read_ppm(path);
    s.mask = read_pgm(masks.at(id));
    for (auto& v : s.mask.mutable_data()) v = v >= 0.5 ? 1.0 : 0.0;
    out.push_back(std::move(s));
  }
  return out;
}

// --- checkpoints ---

namespace {
constexpr char kMagic[4] = {'A', 'G', 'C', 'M'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, std::uint64_t config_hash,
                     const ParameterStore& store, const CheckpointExtras& extras) {
  if (store.size() == 0) throw UsageError("save_checkpoint: empty parameter store");
  std::string out;
  out.append(kMagic, 4);
  bytes::put_u32(out, kVersion);
  bytes::put_u64(out, config_hash);
  bytes::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [p, entry] : store.entries()) {
    if (p.size() > 0xffff) throw UsageError("parameter path too long: " + p);
    bytes::put_u16(out, static_cast<std::uint16_t>(p.size()));
    out.append(p);
    const Shape& shape = entry.tensor.shape();
    bytes::put_u8(out, static_cast<std::uint8_t>(shape.size()));
    for (const auto d : shape) bytes::put_u32(out, static_cast<std::uint32_t>(d));
    for (const double v : entry.tensor.data()) bytes::put_f64(out, v);
  }
  bytes::put_str(out, extras.optimizer_state);
  bytes::put_str(out, extras.rng_state);
  bytes::put_u32(out, extras.epoch);
  write_file(path, out);
}

CheckpointExtras load_checkpoint(const std::string& path, std::uint64_t expected_config_hash,
                                 ParameterStore& store) {
  const std::string data = read_file(path);
  bytes::Reader r(data, "checkpoint '" + path + "'");
  if (r.raw(4) != std::string(kMagic, 4)) {
    throw IoError("checkpoint '" + path + "': bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  const std::uint64_t hash = r.u64();
  if (hash != expected_config_hash) {
    throw IoError("checkpoint '" + path + "': config hash mismatch (file " + std::to_string(hash) +
                  ", expected " + std::to_string(expected_config_hash) + ")");
  }
  const std::uint32_t count = r.u32();
  if (count != store.size()) {
    throw IoError("checkpoint '" + path + "': holds " + std::to_string(count) +
                  " parameters, store declares " + std::to_string(store.size()));
  }
  // Parse everything before touching the store, so failures load nothing.
  std::vector<std::pair<std::string, std::vector<double>>> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    const std::string p = r.raw(len);
    if (!store.contains(p)) {
      throw IoError("checkpoint '" + path + "': unknown parameter '" + p + "'");
    }
    const Shape& expected = store.get(p).shape();
    const std::uint8_t rank = r.u8();
    if (rank != expected.size()) {
      throw IoError("checkpoint '" + path + "': rank mismatch for '" + p + "'");
    }
    std::int64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim != static_cast<std::uint32_t>(expected[d])) {
        throw IoError("checkpoint '" + path + "': shape mismatch for '" + p + "'");
      }
      numel *= dim;
    }
    std::vector<double> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = r.f64();
    records.emplace_back(p, std::move(values));
  }
  CheckpointExtras extras;
  extras.optimizer_state = r.str();
  extras.rng_state = r.str();
  extras.epoch = r.u32();
  if (!r.at_end()) {
    throw IoError("checkpoint '" + path + "': " + std::to_string(data.size() - r.offset()) +
                  " trailing bytes");
  }
  std::set<std::string> seen;
  for (const auto& [p, values] : records) {
    if (!seen.insert(p).second) {
      throw IoError("checkpoint '" + path + "': duplicate parameter '" + p + "'");
    }
  }
  for (auto& [p, values] : records) {
    store.get(p).mutable_data() = std::move(values);
  }
  store.mark_initialized();
  return extras;
}

}  // namespace agcm
