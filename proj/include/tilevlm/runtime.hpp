#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tilevlm/model.hpp"

namespace tvlm {

// ---------------------------------------------------------------------------
// Activation accounting. The ledger is an allocation tracker fed by tensor
// construction/destruction while it is installed; immutable weights are
// created before any ledger exists and therefore never appear. Memory is
// accounted (logical buffer bytes), not measured from the host allocator, so
// every number it reports is deterministic.
// ---------------------------------------------------------------------------

class MemoryLedger : public AllocTracker {
 public:
  struct Event {
    const char* tag;      // string literal identifying the producing op
    long long bytes;      // positive on alloc, negative on free
  };

  void on_alloc(const char* tag, std::size_t bytes) override {
    live_ += static_cast<long long>(bytes);
    peak_ = std::max(peak_, live_);
    scope_peak_ = std::max(scope_peak_, live_);
    events_.push_back({tag, static_cast<long long>(bytes)});
    tag_alloc_[tag] += bytes;
  }

  void on_free(const char* tag, std::size_t bytes) override {
    live_ -= static_cast<long long>(bytes);
    events_.push_back({tag, -static_cast<long long>(bytes)});
  }

  // Workspace scopes measure the allocation high-water mark relative to the
  // bytes already live when the scope began, so buffers retained from
  // earlier scopes (accumulated outputs) do not count against later ones.
  void begin_scope() {
    scope_base_ = live_;
    scope_peak_ = live_;
  }
  std::size_t scope_peak_delta() const { return static_cast<std::size_t>(scope_peak_ - scope_base_); }

  long long live() const { return live_; }
  long long peak() const { return peak_; }
  const std::vector<Event>& events() const { return events_; }

  std::size_t tag_alloc_total(const std::string& tag) const {
    auto it = tag_alloc_.find(tag);
    return it == tag_alloc_.end() ? 0 : it->second;
  }

  // Output buffers are registered separately from workspace, per the
  // accounting contract.
  void add_output(std::size_t bytes) { output_bytes_ += bytes; }
  std::size_t output_bytes() const { return output_bytes_; }

 private:
  long long live_ = 0;
  long long peak_ = 0;
  long long scope_base_ = 0;
  long long scope_peak_ = 0;
  std::size_t output_bytes_ = 0;
  std::vector<Event> events_;
  std::map<std::string, std::size_t> tag_alloc_;
};

struct EncodeStats {
  Tensor tokens;
  std::size_t tiles = 0;
  std::size_t image_tokens = 0;
  std::uint64_t flops = 0;
  std::size_t workspace_peak = 0;    // per-tile for serial, whole pass for global
  std::size_t output_bytes = 0;      // final token buffer
  std::size_t attn_score_bytes = 0;  // total bytes allocated for score matrices
  std::size_t kv_cache_bytes = 0;    // decoder K/V footprint for these tokens
};

inline std::size_t kv_cache_bytes_for(const Engine& engine, std::size_t token_count) {
  return token_count * engine.cfg.d_lm * 2 * sizeof(double) * engine.cfg.dec_depth;
}

// Encode tiles one at a time, reusing a same-shaped workspace per tile. The
// reported workspace peak is the worst per-tile allocation high-water mark;
// because every tile is the same size, it is byte-identical no matter how
// many tiles the image needs. Token output is identical to
// Engine::encode_image_tokens.
inline EncodeStats serial_encode(const Engine& engine, const Image& img, Branch b,
                                 const std::shared_ptr<MemoryLedger>& ledger) {
  if (!ledger) throw ParameterError("serial_encode: null ledger");
  NoGradGuard ng;
  std::uint64_t f0 = flop_counter();
  TileGrid grid = anyres_tile(img, engine.cfg.tile_size, engine.cfg.max_tiles);

  EncodeStats stats;
  stats.tiles = grid.tiles.size();
  std::size_t worst = 0;
  std::vector<Tensor> parts;
  parts.reserve(grid.tiles.size());
  {
    TrackerScope scope(ledger);
    for (const Image& tile : grid.tiles) {
      ledger->begin_scope();
      parts.push_back(engine.encode_one_tile(tile, b));
      worst = std::max(worst, ledger->scope_peak_delta());
    }
  }
  stats.tokens = concat_rows(parts);  // output assembly, accounted as output
  parts.clear();

  stats.image_tokens = stats.tokens.rows();
  stats.flops = flop_counter() - f0;
  stats.workspace_peak = worst;
  stats.output_bytes = stats.tokens.numel() * sizeof(double);
  ledger->add_output(stats.output_bytes);
  stats.attn_score_bytes = ledger->tag_alloc_total("attn_scores");
  stats.kv_cache_bytes = kv_cache_bytes_for(engine, stats.image_tokens);
  return stats;
}

// The untiled reference: pad the image so the patch grid divides evenly by
// the shuffle factor, then run one encoder pass over everything, attention
// spanning all patches jointly. Its score matrices scale with the square of
// the total patch count, which is exactly what the guard estimates before
// committing to the pass.
inline EncodeStats global_encode_reference(const Engine& engine, const Image& img, Branch b,
                                           const std::shared_ptr<MemoryLedger>& ledger,
                                           std::size_t workspace_cap_bytes = std::size_t{1} << 30) {
  if (!ledger) throw ParameterError("global_encode_reference: null ledger");
  NoGradGuard ng;
  std::size_t patch = engine.vit(b).cfg.patch;
  std::size_t unit = patch * engine.cfg.shuffle;
  std::size_t cw = (img.width + unit - 1) / unit * unit;
  std::size_t ch = (img.height + unit - 1) / unit * unit;
  std::size_t n = (cw / patch) * (ch / patch);
  // Up to three score-shaped buffers coexist per head (raw, scaled, probs).
  std::size_t projected = 3 * n * n * sizeof(double);
  if (projected > workspace_cap_bytes)
    throw ContractError("global encode needs " + std::to_string(projected) +
                        " bytes of attention workspace, over the cap of " +
                        std::to_string(workspace_cap_bytes));

  Image canvas(cw, ch, img.channels, 0.0);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) canvas.at(y, x, c) = img.at(y, x, c);

  std::uint64_t f0 = flop_counter();
  EncodeStats stats;
  stats.tiles = 1;
  {
    TrackerScope scope(ledger);
    ledger->begin_scope();
    stats.tokens = engine.encode_canvas(canvas, b);
    stats.workspace_peak = ledger->scope_peak_delta();
  }
  stats.image_tokens = stats.tokens.rows();
  stats.flops = flop_counter() - f0;
  stats.output_bytes = stats.tokens.numel() * sizeof(double);
  ledger->add_output(stats.output_bytes);
  stats.attn_score_bytes = ledger->tag_alloc_total("attn_scores");
  stats.kv_cache_bytes = kv_cache_bytes_for(engine, stats.image_tokens);
  return stats;
}

// ---------------------------------------------------------------------------
// Bench harness. Counters carry the guarantees; wall time is reported only
// when asked for and never asserted (it is the one nondeterministic column,
// and it defaults to zero so reports replay byte-identically).
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string resolution;  // "WxH"
  std::string mode;        // "serial" or "global"
  std::size_t tiles = 0;
  std::size_t image_tokens = 0;
  std::uint64_t flops = 0;
  double wall_ms = 0.0;
  std::size_t workspace_peak_bytes = 0;
  std::size_t output_bytes = 0;
  std::size_t kv_cache_bytes = 0;
};

inline const char* bench_csv_header() {
  return "resolution,mode,tiles,image_tokens,flops,wall_ms,workspace_peak_bytes,output_bytes,"
         "kv_cache_bytes";
}

struct BenchReport {
  std::vector<BenchRow> rows;

  std::string to_csv() const {
    std::ostringstream os;
    os << bench_csv_header() << '\n';
    for (const BenchRow& r : rows) {
      os << r.resolution << ',' << r.mode << ',' << r.tiles << ',' << r.image_tokens << ',' << r.flops
         << ',' << std::fixed << std::setprecision(3) << r.wall_ms << ',' << r.workspace_peak_bytes
         << ',' << r.output_bytes << ',' << r.kv_cache_bytes << '\n';
    }
    return os.str();
  }
};

// "64" means a 64x64 square; "64x32" is width x height.
inline std::pair<std::size_t, std::size_t> parse_resolution(const std::string& spec) {
  auto parse_dim = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw ParameterError("bad resolution '" + spec + "'");
    unsigned long v = std::stoul(s);
    if (v == 0) throw ParameterError("bad resolution '" + spec + "'");
    return static_cast<std::size_t>(v);
  };
  std::size_t xpos = spec.find('x');
  if (xpos == std::string::npos) {
    std::size_t side = parse_dim(spec);
    return {side, side};
  }
  return {parse_dim(spec.substr(0, xpos)), parse_dim(spec.substr(xpos + 1))};
}

// Deterministic high-frequency test pattern; content is irrelevant to the
// counters but must be reproducible for manifest replay.
inline Image make_bench_image(std::size_t w, std::size_t h) {
  Image img(w, h, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<double>((x * 31 + y * 17 + c * 97) % 251) / 250.0;
  return img;
}

inline BenchReport run_bench(const Engine& engine, const std::vector<std::string>& resolution_specs,
                             bool serial_mode, bool global_mode, Branch b, bool timing,
                             std::size_t global_cap_bytes = std::size_t{1} << 30) {
  if (resolution_specs.empty()) throw ParameterError("bench needs at least one resolution");
  if (!serial_mode && !global_mode) throw ParameterError("bench needs at least one mode");

  std::vector<std::pair<std::size_t, std::size_t>> dims;
  dims.reserve(resolution_specs.size());
  for (const std::string& spec : resolution_specs) dims.push_back(parse_resolution(spec));
  std::stable_sort(dims.begin(), dims.end(), [](const auto& a, const auto& b2) {
    return a.first * a.second < b2.first * b2.second;
  });

  BenchReport report;
  for (const auto& [w, h] : dims) {
    Image img = make_bench_image(w, h);
    std::string res = std::to_string(w) + "x" + std::to_string(h);
    auto run_mode = [&](const char* mode) {
      auto ledger = std::make_shared<MemoryLedger>();
      auto t0 = std::chrono::steady_clock::now();
      EncodeStats s = mode == std::string("serial")
                          ? serial_encode(engine, img, b, ledger)
                          : global_encode_reference(engine, img, b, ledger, global_cap_bytes);
      auto t1 = std::chrono::steady_clock::now();
      BenchRow row;
      row.resolution = res;
      row.mode = mode;
      row.tiles = s.tiles;
      row.image_tokens = s.image_tokens;
      row.flops = s.flops;
      row.wall_ms = timing ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;
      row.workspace_peak_bytes = s.workspace_peak;
      row.output_bytes = s.output_bytes;
      row.kv_cache_bytes = s.kv_cache_bytes;
      report.rows.push_back(std::move(row));
    };
    if (serial_mode) run_mode("serial");
    if (global_mode) run_mode("global");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Flat key-value run configuration. Exactly the documented keys; anything
// else is a typo worth failing on.
// ---------------------------------------------------------------------------

struct RunConfig {
  std::size_t tile_size = 32;
  std::size_t max_tiles = 8;
  std::string branch = "large";
  bool vrc_enabled = false;
  double vrc_eps = 1.05;
  std::size_t quant_group = 32;
};

inline RunConfig parse_run_config(std::istream& is, const std::string& origin) {
  RunConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      std::size_t a = s.find_first_not_of(" \t\r");
      std::size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ParameterError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.empty())
      throw ParameterError(origin + ":" + std::to_string(line_no) + ": empty value for " + key);

    auto as_count = [&](const std::string& v) {
      if (v.find_first_not_of("0123456789") != std::string::npos)
        throw ParameterError(origin + ": " + key + " must be a non-negative integer, got '" + v + "'");
      return static_cast<std::size_t>(std::stoul(v));
    };
    if (key == "tile_size") {
      cfg.tile_size = as_count(value);
    } else if (key == "max_tiles") {
      cfg.max_tiles = as_count(value);
    } else if (key == "branch") {
      parse_branch(value);  // validates
      cfg.branch = value;
    } else if (key == "vrc.enabled") {
      if (value == "true" || value == "on" || value == "1")
        cfg.vrc_enabled = true;
      else if (value == "false" || value == "off" || value == "0")
        cfg.vrc_enabled = false;
      else
        throw ParameterError(origin + ": vrc.enabled must be true/false, got '" + value + "'");
    } else if (key == "vrc.eps") {
      cfg.vrc_eps = std::stod(value);
    } else if (key == "quant.group") {
      cfg.quant_group = as_count(value);
    } else {
      throw ParameterError(origin + ": unknown config key '" + key + "'");
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw EngineError("cannot open config " + path);
  return parse_run_config(is, path);
}

inline std::string run_config_text(const RunConfig& cfg) {
  std::ostringstream os;
  os << "tile_size = " << cfg.tile_size << '\n';
  os << "max_tiles = " << cfg.max_tiles << '\n';
  os << "branch = " << cfg.branch << '\n';
  os << "vrc.enabled = " << (cfg.vrc_enabled ? "true" : "false") << '\n';
  os.precision(17);
  os << "vrc.eps = " << cfg.vrc_eps << '\n';
  os << "quant.group = " << cfg.quant_group << '\n';
  return os.str();
}

inline void save_run_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw EngineError("cannot open " + path + " for writing");
  os << run_config_text(cfg);
  if (!os) throw EngineError("failed writing " + path);
}

}  // namespace tvlm
