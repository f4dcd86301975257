#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tilevlm/model.hpp"
#include "tilevlm/quant.hpp"

namespace tvlm {

// Checkpoint container: "TVCK", format version, an entry table (name, dtype,
// shape, payload offset/size), then payloads. Offsets are relative to the
// start of the payload section. dtype 0 holds raw little-endian doubles;
// dtype 1 holds a group size, per-group scales and zero points, and 4-bit
// codes packed two per byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CkptDtype : std::uint8_t { kF64 = 0, kQ4 = 1 };

struct CkptEntry {
  std::string name;
  CkptDtype dtype = CkptDtype::kF64;
  std::vector<std::size_t> shape;
  std::vector<double> f64;  // dtype kF64
  QuantizedTensor q4;       // dtype kQ4
};

namespace detail {

inline std::vector<char> q4_payload(const QuantizedTensor& q) {
  std::ostringstream os(std::ios::binary);
  put_u32(os, static_cast<std::uint32_t>(q.group));
  for (double s : q.scales) put_f64(os, s);
  os.write(reinterpret_cast<const char*>(q.zeros.data()), static_cast<std::streamsize>(q.zeros.size()));
  os.write(reinterpret_cast<const char*>(q.packed.data()),
           static_cast<std::streamsize>(q.packed.size()));
  std::string s = os.str();
  return {s.begin(), s.end()};
}

inline QuantizedTensor q4_from_payload(const std::vector<char>& bytes,
                                       const std::vector<std::size_t>& shape, const std::string& name) {
  if (shape.size() != 2) throw EngineError("checkpoint: quantized entry " + name + " must be 2-d");
  std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  QuantizedTensor q;
  q.rows = shape[0];
  q.cols = shape[1];
  q.group = get_u32(is);
  if (q.group == 0) throw EngineError("checkpoint: zero group size in " + name);
  std::size_t ng = q.rows * q.groups_per_row();
  q.scales.resize(ng);
  for (double& s : q.scales) s = get_f64(is);
  q.zeros.resize(ng);
  is.read(reinterpret_cast<char*>(q.zeros.data()), static_cast<std::streamsize>(ng));
  q.packed.resize((q.rows * q.cols + 1) / 2);
  is.read(reinterpret_cast<char*>(q.packed.data()), static_cast<std::streamsize>(q.packed.size()));
  if (!is) throw EngineError("checkpoint: quantized payload of " + name + " truncated");
  return q;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<CkptEntry>& entries) {
  // Serialize payloads first so table offsets are known up front.
  std::vector<std::vector<char>> payloads;
  payloads.reserve(entries.size());
  for (const CkptEntry& e : entries) {
    if (e.dtype == CkptDtype::kF64) {
      if (e.f64.size() != shape_numel(e.shape))
        throw ContractError("checkpoint: " + e.name + " payload does not match shape");
      std::vector<char> raw(e.f64.size() * 8);
      std::memcpy(raw.data(), e.f64.data(), raw.size());
      payloads.push_back(std::move(raw));
    } else {
      payloads.push_back(detail::q4_payload(e.q4));
    }
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw EngineError("cannot open " + path + " for writing");
  os.write("TVCK", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const CkptEntry& e = entries[i];
    detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(e.dtype));
    detail::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_u64(os, d);
    detail::put_u64(os, offset);
    detail::put_u64(os, payloads[i].size());
    offset += payloads[i].size();
  }
  for (const auto& p : payloads) os.write(p.data(), static_cast<std::streamsize>(p.size()));
  if (!os) throw EngineError("failed writing " + path);
}

inline std::vector<CkptEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw EngineError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "TVCK") throw EngineError(path + ": not a checkpoint");
  std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw EngineError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::uint32_t count = detail::get_u32(is);

  struct RawRow {
    CkptEntry entry;
    std::uint64_t offset, size;
  };
  std::vector<RawRow> rows(count);
  for (auto& row : rows) {
    std::uint32_t name_len = detail::get_u32(is);
    row.entry.name.resize(name_len);
    is.read(row.entry.name.data(), name_len);
    int dt = is.get();
    if (dt != 0 && dt != 1) throw EngineError(path + ": bad dtype tag for " + row.entry.name);
    row.entry.dtype = static_cast<CkptDtype>(dt);
    std::uint32_t ndim = detail::get_u32(is);
    row.entry.shape.resize(ndim);
    for (auto& d : row.entry.shape) d = detail::get_u64(is);
    row.offset = detail::get_u64(is);
    row.size = detail::get_u64(is);
    if (!is) throw EngineError(path + ": entry table truncated");
  }
  std::streampos payload_base = is.tellg();

  std::vector<CkptEntry> out;
  out.reserve(count);
  for (auto& row : rows) {
    is.seekg(payload_base + static_cast<std::streamoff>(row.offset));
    std::vector<char> bytes(row.size);
    is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw EngineError(path + ": payload of " + row.entry.name + " truncated");
    if (row.entry.dtype == CkptDtype::kF64) {
      std::size_t n = shape_numel(row.entry.shape);
      if (bytes.size() != n * 8)
        throw EngineError(path + ": payload size of " + row.entry.name + " does not match shape");
      row.entry.f64.resize(n);
      std::memcpy(row.entry.f64.data(), bytes.data(), bytes.size());
    } else {
      row.entry.q4 = detail::q4_from_payload(bytes, row.entry.shape, row.entry.name);
    }
    out.push_back(std::move(row.entry));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Engine <-> checkpoint. Model hyperparameters travel as scalar f64 entries
// under "config." so a checkpoint is self-describing; quant_group > 0 stores
// every affine weight as 4-bit groups of that size.
// ---------------------------------------------------------------------------

namespace detail {

inline CkptEntry scalar_entry(const std::string& name, double v) {
  CkptEntry e;
  e.name = name;
  e.shape = {1};
  e.f64 = {v};
  return e;
}

inline std::vector<std::pair<std::string, double>> config_fields(const EngineConfig& c) {
  return {
      {"config.tile_size", static_cast<double>(c.tile_size)},
      {"config.max_tiles", static_cast<double>(c.max_tiles)},
      {"config.channels", static_cast<double>(c.channels)},
      {"config.shuffle", static_cast<double>(c.shuffle)},
      {"config.small.patch", static_cast<double>(c.small.patch)},
      {"config.small.depth", static_cast<double>(c.small.depth)},
      {"config.small.dim", static_cast<double>(c.small.dim)},
      {"config.small.heads", static_cast<double>(c.small.heads)},
      {"config.small.mlp_ratio", static_cast<double>(c.small.mlp_ratio)},
      {"config.large.patch", static_cast<double>(c.large.patch)},
      {"config.large.depth", static_cast<double>(c.large.depth)},
      {"config.large.dim", static_cast<double>(c.large.dim)},
      {"config.large.heads", static_cast<double>(c.large.heads)},
      {"config.large.mlp_ratio", static_cast<double>(c.large.mlp_ratio)},
      {"config.adapter_dim", static_cast<double>(c.adapter_dim)},
      {"config.d_lm", static_cast<double>(c.d_lm)},
      {"config.dec_depth", static_cast<double>(c.dec_depth)},
      {"config.dec_heads", static_cast<double>(c.dec_heads)},
      {"config.max_seq", static_cast<double>(c.max_seq)},
      {"config.seed", static_cast<double>(c.seed)},
  };
}

}  // namespace detail

inline void save_engine(const std::string& path, Engine& engine, std::size_t quant_group = 0) {
  std::vector<CkptEntry> entries;
  for (auto& [name, v] : detail::config_fields(engine.cfg))
    entries.push_back(detail::scalar_entry(name, v));
  entries.push_back(detail::scalar_entry("config.quant_group", static_cast<double>(quant_group)));

  ParamMap pm = engine.params();
  for (auto& [name, t] : pm.items) {
    CkptEntry e;
    e.name = name;
    e.shape = t.shape();
    if (quant_group > 0 && should_quantize(name, t)) {
      e.dtype = CkptDtype::kQ4;
      e.q4 = quantize_rows(t, quant_group);
    } else {
      e.f64 = t.value();
    }
    entries.push_back(std::move(e));
  }
  save_checkpoint(path, entries);
}

inline Engine load_engine(const std::string& path) {
  std::vector<CkptEntry> entries = load_checkpoint(path);
  std::map<std::string, const CkptEntry*> by_name;
  for (const CkptEntry& e : entries) {
    if (!by_name.emplace(e.name, &e).second)
      throw EngineError(path + ": duplicate entry " + e.name);
  }

  auto config_scalar = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw EngineError(path + ": missing " + name);
    return it->second->f64.at(0);
  };
  EngineConfig cfg;
  cfg.tile_size = static_cast<std::size_t>(config_scalar("config.tile_size"));
  cfg.max_tiles = static_cast<std::size_t>(config_scalar("config.max_tiles"));
  cfg.channels = static_cast<std::size_t>(config_scalar("config.channels"));
  cfg.shuffle = static_cast<std::size_t>(config_scalar("config.shuffle"));
  cfg.small.patch = static_cast<std::size_t>(config_scalar("config.small.patch"));
  cfg.small.depth = static_cast<std::size_t>(config_scalar("config.small.depth"));
  cfg.small.dim = static_cast<std::size_t>(config_scalar("config.small.dim"));
  cfg.small.heads = static_cast<std::size_t>(config_scalar("config.small.heads"));
  cfg.small.mlp_ratio = static_cast<std::size_t>(config_scalar("config.small.mlp_ratio"));
  cfg.large.patch = static_cast<std::size_t>(config_scalar("config.large.patch"));
  cfg.large.depth = static_cast<std::size_t>(config_scalar("config.large.depth"));
  cfg.large.dim = static_cast<std::size_t>(config_scalar("config.large.dim"));
  cfg.large.heads = static_cast<std::size_t>(config_scalar("config.large.heads"));
  cfg.large.mlp_ratio = static_cast<std::size_t>(config_scalar("config.large.mlp_ratio"));
  cfg.adapter_dim = static_cast<std::size_t>(config_scalar("config.adapter_dim"));
  cfg.d_lm = static_cast<std::size_t>(config_scalar("config.d_lm"));
  cfg.dec_depth = static_cast<std::size_t>(config_scalar("config.dec_depth"));
  cfg.dec_heads = static_cast<std::size_t>(config_scalar("config.dec_heads"));
  cfg.max_seq = static_cast<std::size_t>(config_scalar("config.max_seq"));
  cfg.seed = static_cast<std::uint64_t>(config_scalar("config.seed"));
  config_scalar("config.quant_group");  // presence check; value is informational

  Engine engine(cfg);
  ParamMap pm = engine.params();
  for (auto& [name, t] : pm.items) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw EngineError(path + ": checkpoint lacks parameter " + name);
    const CkptEntry& e = *it->second;
    if (e.shape != t.shape())
      throw EngineError(path + ": " + name + " has shape " + shape_string(e.shape) + ", engine expects " +
                        shape_string(t.shape()));
    if (e.dtype == CkptDtype::kF64) {
      t.mutable_value() = e.f64;
    } else {
      t.mutable_value() = dequantize(e.q4).value();
    }
  }

  // Anything else in the file besides config and known parameters is a sign
  // of a mismatched producer; fail loudly rather than silently ignore.
  std::size_t known = detail::config_fields(cfg).size() + 1 + pm.items.size();
  if (entries.size() != known)
    throw EngineError(path + ": checkpoint holds " + std::to_string(entries.size()) +
                      " entries, engine accounts for " + std::to_string(known));
  return engine;
}

}  // namespace tvlm
