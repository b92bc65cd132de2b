#pragma once

// Manifests, synthetic distortion sets with pseudo-MOS, reference-grouped
// splits, checkpoints and the feature-subset sweep.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "birqa/features.hpp"
#include "birqa/network.hpp"
#include "birqa/training.hpp"

namespace birqa {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRow {
  std::string ref_path;  // as written in the CSV
  std::string dist_path;
  double mos = 0;
};

struct Manifest {
  fs::path base_dir;  // relative paths resolve against this
  std::vector<ManifestRow> rows;
  double mos_min = 0;
  double mos_max = 0;

  std::size_t size() const { return rows.size(); }
  fs::path resolve(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : base_dir / q;
  }
};

inline constexpr const char* kManifestHeader = "ref_path,dist_path,mos";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void finalize_manifest(Manifest& m) {
  if (m.rows.empty()) throw Error("manifest: no rows");
  m.mos_min = m.mos_max = m.rows[0].mos;
  std::set<double> distinct;
  for (const auto& r : m.rows) {
    m.mos_min = std::min(m.mos_min, r.mos);
    m.mos_max = std::max(m.mos_max, r.mos);
    distinct.insert(r.mos);
  }
  if (distinct.size() < 2) throw Error("manifest: needs at least 2 distinct MOS values");
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& in, const fs::path& base_dir, bool check_files = true) {
  Manifest m;
  m.base_dir = base_dir;
  std::string line;
  if (!std::getline(in, line)) throw Error("manifest: empty file, expected header '" +
                                           std::string(kManifestHeader) + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != kManifestHeader) {
    throw Error("manifest: expected header '" + std::string(kManifestHeader) + "', got '" + line + "'");
  }
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) {
      throw Error("manifest row " + std::to_string(row) + ": expected 3 columns, got " +
                  std::to_string(f.size()));
    }
    ManifestRow r{f[0], f[1], 0.0};
    try {
      std::size_t pos = 0;
      r.mos = std::stod(f[2], &pos);
      if (pos != f[2].size()) throw std::invalid_argument(f[2]);
    } catch (const std::exception&) {
      throw Error("manifest row " + std::to_string(row) + ": cannot parse mos '" + f[2] + "'");
    }
    if (!std::isfinite(r.mos)) {
      throw Error("manifest row " + std::to_string(row) + ": mos is not finite");
    }
    if (check_files) {
      for (const auto& p : {r.ref_path, r.dist_path}) {
        if (!fs::exists(m.resolve(p))) {
          throw IoError("manifest row " + std::to_string(row) + ": missing file '" + p + "'");
        }
      }
    }
    m.rows.push_back(std::move(r));
  }
  detail::finalize_manifest(m);
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open manifest");
  return parse_manifest(in, path.parent_path());
}

/// Relative paths are rewritten against the directory of `path`, so the
/// saved file resolves to the same images as `m` (kept verbatim when `m`
/// has no base directory).
inline void save_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  const fs::path dest = fs::absolute(path).parent_path();
  auto rebase = [&](const std::string& p) {
    if (m.base_dir.empty() || fs::path(p).is_absolute()) return p;
    const fs::path src = fs::absolute(m.resolve(p)).lexically_normal();
    const fs::path rel = src.lexically_relative(dest);
    return (rel.empty() ? src : rel).generic_string();
  };
  out << kManifestHeader << "\n";
  out.precision(17);
  for (const auto& r : m.rows) {
    out << detail::csv_field(rebase(r.ref_path)) << ',' << detail::csv_field(rebase(r.dist_path)) << ','
        << r.mos << "\n";
  }
}

/// Loads every row's images as float samples.
inline std::vector<Sample> load_samples(const Manifest& m) {
  std::vector<Sample> out;
  std::map<std::string, PlanarImage> refs;
  for (const auto& r : m.rows) {
    auto it = refs.find(r.ref_path);
    if (it == refs.end()) it = refs.emplace(r.ref_path, to_float(load_image(m.resolve(r.ref_path)))).first;
    Sample s{it->second, to_float(load_image(m.resolve(r.dist_path))), r.mos};
    if (!s.ref.same_dims(s.dist)) {
      throw Error("manifest: size mismatch between '" + r.ref_path + "' and '" + r.dist_path + "'");
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct Split {
  Manifest train, val, test;
};

/// 6:2:2 split over distinct reference paths so no content crosses splits.
inline Split split_by_reference(const Manifest& m, std::uint64_t seed) {
  std::vector<std::string> refs;
  for (const auto& r : m.rows) {
    if (std::find(refs.begin(), refs.end(), r.ref_path) == refs.end()) refs.push_back(r.ref_path);
  }
  if (refs.size() < 3) throw Error("split: need at least 3 distinct references");
  std::vector<int> order(refs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0x5b17);
  detail::shuffle_indices(order, rng);
  const std::size_t n = refs.size();
  const std::size_t n_train = std::max<std::size_t>(1, (n * 6 + 5) / 10);
  const std::size_t n_val = std::max<std::size_t>(1, (n * 2 + 5) / 10);
  std::map<std::string, int> part;
  for (std::size_t k = 0; k < n; ++k) {
    part[refs[order[k]]] = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
  }
  Split out;
  for (Manifest* s : {&out.train, &out.val, &out.test}) s->base_dir = m.base_dir;
  for (const auto& r : m.rows) {
    Manifest* dst[] = {&out.train, &out.val, &out.test};
    dst[part[r.ref_path]]->rows.push_back(r);
  }
  for (Manifest* s : {&out.train, &out.val, &out.test}) {
    if (s->rows.empty()) throw Error("split: a partition is empty");
    s->mos_min = s->mos_max = s->rows[0].mos;
    for (const auto& r : s->rows) {
      s->mos_min = std::min(s->mos_min, r.mos);
      s->mos_max = std::max(s->mos_max, r.mos);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  int severities = 5;
  std::uint64_t seed = 0;
};

namespace detail {

// Box-Muller on the portable uniform source.
inline double normal01(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline PlanarImage blur_rgb(const PlanarImage& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  const auto k = gaussian_kernel(2 * radius + 1, sigma);
  PlanarImage out(img.channels, img.width, img.height);
  for (int c = 0; c < img.channels; ++c) {
    const PlanarImage f = filter_separable(img.channel(c), k);
    std::copy(f.data.begin(), f.data.end(), out.plane(c).begin());
  }
  return out;
}

inline PlanarImage add_noise(const PlanarImage& img, double sigma, Rng& rng) {
  PlanarImage out = img;
  for (auto& v : out.data) v = static_cast<float>(std::clamp(v + sigma * normal01(rng), 0.0, 1.0));
  return out;
}

}  // namespace detail

/// 10 * mean SSIM of the luma planes of two 8-bit images.
inline double pseudo_mos(const RgbImage& ref, const RgbImage& dist) {
  const PlanarImage ry = rgb_to_ycbcr(to_float(ref)).channel(0);
  const PlanarImage dy = rgb_to_ycbcr(to_float(dist)).channel(0);
  const FeatureMap m = ssim_map(ry, dy);
  double s = 0.0;
  for (float v : m.data.data) s += v;
  return std::clamp(10.0 * s / static_cast<double>(m.data.data.size()), 0.0, 10.0);
}

/// Procedural reference: smooth gradient, oriented grating and random
/// shapes with per-image colors.
inline RgbImage procedural_reference(int width, int height, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x7e7);
  PlanarImage img(3, width, height);
  double base[3], gx[3], gy[3], amp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = uniform(rng, 0.2, 0.8);
    gx[c] = uniform(rng, -0.4, 0.4);
    gy[c] = uniform(rng, -0.4, 0.4);
    amp[c] = uniform(rng, 0.05, 0.25);
  }
  const double freq = uniform(rng, 0.15, 0.9);
  const double theta = uniform(rng, 0.0, std::numbers::pi);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = static_cast<double>(x) / width - 0.5, v = static_cast<double>(y) / height - 0.5;
      const double wave = std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
      for (int c = 0; c < 3; ++c) img.at(c, x, y) = static_cast<float>(base[c] + gx[c] * u + gy[c] * v + amp[c] * wave);
    }
  }
  const int shapes = 2 + static_cast<int>(uniform_index(rng, 5));
  for (int s = 0; s < shapes; ++s) {
    const double cx = uniform(rng, 0, width), cy = uniform(rng, 0, height);
    const double r = uniform(rng, 0.08, 0.3) * std::min(width, height);
    const bool disc = uniform01(rng) < 0.5;
    double col[3];
    for (auto& c : col) c = uniform01(rng);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double dx = x - cx, dy = y - cy;
        const bool inside = disc ? dx * dx + dy * dy <= r * r : std::fabs(dx) <= r && std::fabs(dy) <= 0.6 * r;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img.at(c, x, y) = static_cast<float>(col[c]);
      }
    }
  }
  for (auto& v : img.data) v = std::clamp(v + static_cast<float>(0.03 * detail::normal01(rng)), 0.0f, 1.0f);
  return to_rgb8(img);
}

/// Writes `count` procedural references ref_000.ppm ... into dir.
inline void gen_references(const fs::path& dir, int count, int width, int height, std::uint64_t seed) {
  if (count < 1) throw Error("gen_references: count must be >= 1");
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "ref_%03d.ppm", i);
    save_image(procedural_reference(width, height, mix_seed(seed, 1000 + i)), dir / name);
  }
}

/// For every image in ref_dir (sorted by name): an identity pair plus blur
/// and noise distortions at severities 1..S, labeled with pseudo-MOS. The
/// blur ladder is redrawn until its pseudo-MOS strictly decreases.
inline Manifest gen_synthetic(const fs::path& ref_dir, const fs::path& out_dir,
                              const SynthConfig& cfg = {}) {
  if (cfg.severities < 1) throw Error("gen_synthetic: severities must be >= 1");
  std::vector<fs::path> files;
  if (fs::is_directory(ref_dir)) {
    for (const auto& e : fs::directory_iterator(ref_dir)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".ppm" || ext == ".png")) files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("gen_synthetic: no readable images in '" + ref_dir.string() + "'");
  fs::create_directories(out_dir / "ref");
  fs::create_directories(out_dir / "dist");

  Manifest m;
  m.base_dir = out_dir;
  for (std::size_t fi = 0; fi < files.size(); ++fi) {
    const RgbImage ref8 = load_image(files[fi]);
    const std::string stem = files[fi].stem().string();
    const std::string ref_rel = "ref/" + stem + ".ppm";
    save_image(ref8, out_dir / ref_rel);
    const PlanarImage ref = to_float(ref8);
    Rng rng = make_rng(cfg.seed, 0x5e0000 + fi);

    auto emit = [&](const std::string& tag, int s, const RgbImage& d) {
      const std::string rel = "dist/" + stem + "_" + tag + std::to_string(s) + ".ppm";
      save_image(d, out_dir / rel);
      m.rows.push_back({ref_rel, rel, pseudo_mos(ref8, d)});
    };
    emit("id", 0, ref8);

    std::vector<RgbImage> blurs;
    std::vector<double> blur_mos;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 20) throw Error("gen_synthetic: blur ladder not monotone for '" + stem + "'");
      blurs.clear();
      blur_mos.clear();
      bool ok = true;
      for (int s = 1; s <= cfg.severities; ++s) {
        const double sigma = 0.5 * s * uniform(rng, 0.8, 1.25);
        blurs.push_back(to_rgb8(detail::blur_rgb(ref, sigma)));
        blur_mos.push_back(pseudo_mos(ref8, blurs.back()));
        const double prev = s == 1 ? 10.0 : blur_mos[s - 2];
        if (!(blur_mos.back() < prev)) ok = false;
      }
      if (ok) break;
    }
    for (int s = 1; s <= cfg.severities; ++s) {
      const std::string rel = "dist/" + stem + "_blur" + std::to_string(s) + ".ppm";
      save_image(blurs[s - 1], out_dir / rel);
      m.rows.push_back({ref_rel, rel, blur_mos[s - 1]});
    }
    for (int s = 1; s <= cfg.severities; ++s) {
      const double sigma = 0.03 * s * uniform(rng, 0.8, 1.25);
      emit("noise", s, to_rgb8(detail::add_noise(ref, sigma, rng)));
    }
  }
  detail::finalize_manifest(m);
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointMagic = "BIRQA1\n";

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> value;
};

struct Checkpoint {
  NetworkConfig config;
  long step = 0;
  std::vector<NamedTensor> tensors;  // model parameters, in model order
  std::optional<ad::AdamState<float>> adam;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string shape_text(const ad::Shape& s) {
  std::string out;
  for (int i = 0; i < s.rank(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

inline ad::Shape parse_shape(const std::string& t) {
  if (t == "scalar") return ad::Shape{};
  std::vector<int> d;
  std::stringstream ss(t);
  std::string part;
  while (std::getline(ss, part, 'x')) d.push_back(std::stoi(part));
  switch (d.size()) {
    case 1: return ad::Shape{d[0]};
    case 2: return ad::Shape{d[0], d[1]};
    case 3: return ad::Shape{d[0], d[1], d[2]};
    case 4: return ad::Shape{d[0], d[1], d[2], d[3]};
    default: throw Error("checkpoint: bad shape '" + t + "'");
  }
}

inline void append_f32(std::string& out, std::span<const float> v) {
  for (float f : v) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
  }
}

inline std::vector<float> read_f32(const std::string& payload, std::size_t offset, std::size_t n) {
  if (offset + 4 * n > payload.size()) throw Error("checkpoint: truncated tensor payload");
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) {
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[offset + 4 * i + b])) << (8 * b);
    }
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const fs::path& path,
                            const ad::AdamState<float>* adam = nullptr, long step = 0) {
  std::ostringstream head;
  std::string payload;
  head << "version 1\n";
  std::istringstream cfg(format_config(model.config()));
  for (std::string line; std::getline(cfg, line);) {
    if (!line.empty()) head << "config " << line << "\n";
  }
  head << "step " << step << "\n";
  auto add = [&](const std::string& name, const ad::Shape& shape, std::span<const float> v) {
    head << "tensor " << name << " f32 " << detail::shape_text(shape) << " " << payload.size() << "\n";
    detail::append_f32(payload, v);
  };
  const auto params = model.parameters();
  for (const auto* p : params) add(p->name, p->shape, p->value);
  if (adam && !adam->m.empty()) {
    head << "adam_step " << adam->step << "\n";
    for (std::size_t k = 0; k < params.size(); ++k) {
      add("adam.m/" + params[k]->name, params[k]->shape, adam->m[k]);
      add("adam.v/" + params[k]->name, params[k]->shape, adam->v[k]);
    }
  }
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(detail::fnv1a(payload)));
  head << "checksum " << sum << "\n\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << kCheckpointMagic << head.str();
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open checkpoint");
  std::string magic(std::strlen(kCheckpointMagic), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) throw Error(path.string() + ": not a checkpoint (magic mismatch)");

  Checkpoint ck;
  std::string config_text, checksum;
  struct Entry {
    std::string name;
    ad::Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  long adam_step = -1;
  for (std::string line;;) {
    if (!std::getline(in, line)) throw Error(path.string() + ": truncated header");
    if (line.empty()) break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "version") {
      int v = 0;
      ls >> v;
      if (v != 1) throw Error(path.string() + ": unsupported checkpoint version");
    } else if (key == "config") {
      std::string rest;
      std::getline(ls >> std::ws, rest);
      config_text += rest + "\n";
    } else if (key == "step") {
      ls >> ck.step;
    } else if (key == "adam_step") {
      ls >> adam_step;
    } else if (key == "tensor") {
      Entry e;
      std::string dtype, shape;
      ls >> e.name >> dtype >> shape >> e.offset;
      if (!ls || dtype != "f32") throw Error(path.string() + ": bad tensor line '" + line + "'");
      e.shape = detail::parse_shape(shape);
      entries.push_back(e);
    } else if (key == "checksum") {
      ls >> checksum;
    } else {
      throw Error(path.string() + ": unknown header line '" + line + "'");
    }
  }
  const std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char sum[32];
  std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(detail::fnv1a(payload)));
  if (checksum != sum) throw Error(path.string() + ": checksum mismatch (corrupt payload)");
  ck.config = parse_config(config_text);

  ad::AdamState<float> adam;
  for (const auto& e : entries) {
    auto v = detail::read_f32(payload, e.offset, e.shape.size());
    if (e.name.rfind("adam.m/", 0) == 0) {
      adam.m.push_back(std::move(v));
    } else if (e.name.rfind("adam.v/", 0) == 0) {
      adam.v.push_back(std::move(v));
    } else {
      ck.tensors.push_back({e.name, e.shape, std::move(v)});
    }
  }
  if (adam_step >= 0) {
    if (adam.m.size() != ck.tensors.size() || adam.v.size() != ck.tensors.size()) {
      throw Error(path.string() + ": optimizer state does not match parameters");
    }
    adam.step = adam_step;
    ck.adam = std::move(adam);
  }
  return ck;
}

/// Copies checkpoint tensors into a model, requiring identical names and
/// shapes; mismatches are listed by name.
inline void apply_checkpoint(const Checkpoint& ck, Model& model) {
  std::map<std::string, const NamedTensor*> have;
  for (const auto& t : ck.tensors) have[t.name] = &t;
  std::vector<std::string> missing, bad_shape;
  std::set<std::string> used;
  for (auto* p : model.parameters()) {
    auto it = have.find(p->name);
    if (it == have.end()) {
      missing.push_back(p->name);
    } else if (!(it->second->shape == p->shape)) {
      bad_shape.push_back(p->name);
    }
    used.insert(p->name);
  }
  std::vector<std::string> extra;
  for (const auto& t : ck.tensors) {
    if (!used.count(t.name)) extra.push_back(t.name);
  }
  if (!missing.empty() || !extra.empty() || !bad_shape.empty()) {
    std::string msg = "checkpoint does not match model config:";
    auto list = [&](const char* what, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string(" ") + what + " [";
      for (std::size_t i = 0; i < v.size(); ++i) msg += (i ? ", " : "") + v[i];
      msg += "]";
    };
    list("missing in checkpoint:", missing);
    list("unexpected in checkpoint:", extra);
    list("shape mismatch:", bad_shape);
    throw Error(msg);
  }
  for (auto* p : model.parameters()) p->value = have.at(p->name)->value;
}

inline Model load_model(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  Model m(ck.config);
  apply_checkpoint(ck, m);
  return m;
}

// ---------------------------------------------------------------------------
// Feature-subset sweep

struct SweepRow {
  FeatureMask subset;
  double srocc = 0;
  double plcc = 0;
  double pairs_per_sec = 0;
  bool pareto = false;
};

inline std::string subset_name(FeatureMask m) {
  std::string out;
  for (int j = 0; j < kNumFeatures; ++j) {
    if (!m.test(j)) continue;
    if (!out.empty()) out += '+';
    out += feature_name(static_cast<FeatureKind>(j));
  }
  return out;
}

/// All 15 non-empty subsets, ordered by size then bit pattern.
inline std::vector<FeatureMask> all_subsets() {
  std::vector<FeatureMask> out;
  for (unsigned b = 1; b < (1u << kNumFeatures); ++b) out.emplace_back(b);
  std::stable_sort(out.begin(), out.end(), [](auto a, auto b) { return a.count() < b.count(); });
  return out;
}

/// End-to-end pairs/sec (features + forward) over the given samples.
inline double measure_throughput(const Model& model, std::span<const Sample> data, int min_pairs = 0) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  std::size_t n = 0;
  volatile double sink = 0;
  do {
    for (const auto& s : data) {
      sink = sink + model.score(build_pyramid(s.ref, s.dist, model.config().features));
      ++n;
    }
  } while (static_cast<int>(n) < min_pairs && !data.empty());
  const double secs = std::chrono::duration<double>(clock::now() - t0).count();
  return secs > 0 ? static_cast<double>(n) / secs : 0.0;
}

inline void mark_pareto(std::vector<SweepRow>& rows) {
  for (auto& r : rows) {
    r.pareto = std::none_of(rows.begin(), rows.end(), [&](const SweepRow& o) {
      return o.srocc >= r.srocc && o.pairs_per_sec >= r.pairs_per_sec &&
             (o.srocc > r.srocc || o.pairs_per_sec > r.pairs_per_sec);
    });
  }
}

/// Trains one model per subset (excluded channels zeroed) and reports
/// validation SROCC/PLCC and throughput.
inline std::vector<SweepRow> feature_sweep(std::span<const Sample> train, std::span<const Sample> val,
                                           std::span<const FeatureMask> subsets, NetworkConfig base,
                                           const TrainOptions& opt) {
  std::vector<SweepRow> rows;
  for (const FeatureMask s : subsets) {
    if (s.none()) throw Error("feature_sweep: empty subset");
    NetworkConfig cfg = base;
    cfg.features = s;
    Model model(cfg);
    train_clean(model, train, opt);
    const auto pred = predict(model, val);
    const auto y = labels(val);
    SweepRow r;
    r.subset = s;
    r.srocc = srocc(y, pred);
    r.plcc = plcc_stat(y, pred);
    r.pairs_per_sec = measure_throughput(model, val, 64);
    rows.push_back(r);
  }
  mark_pareto(rows);
  return rows;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os.precision(10);
  os << "subset,srocc,plcc,pairs_per_sec,pareto\n";
  for (const auto& r : rows) {
    os << subset_name(r.subset) << ',' << r.srocc << ',' << r.plcc << ',' << r.pairs_per_sec << ','
       << (r.pareto ? 1 : 0) << "\n";
  }
}

}  // namespace birqa
