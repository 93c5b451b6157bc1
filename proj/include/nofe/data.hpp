// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nofe/errors.hpp"
#include "nofe/model.hpp"
#include "nofe/random.hpp"
#include "nofe/training.hpp"
#include "nofe/types.hpp"

#include <json.hpp>

namespace nofe {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; byte swapping is not implemented");

// ---------------------------------------------------------------------------
// Synthetic continuous fields
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  Index d_x = 2;
  Index d_f = 6;
  Index n_modes = 4;        // cosine modes per channel
  double omega_max = 6.0;   // cap on each mode's frequency norm
  double amplitude = 1.0;   // amplitudes drawn from [-amplitude, amplitude]
  Index points_per_sample = 200;
  Index n_samples = 8;
};

inline void validate_spec(const SyntheticSpec& s) {
  if (s.d_x < 1 || s.d_f < 1 || s.n_modes < 1 || s.points_per_sample < 2 || s.n_samples < 1 ||
      !(s.omega_max > 0.0) || !(s.amplitude > 0.0)) {
    throw ValidationError("synthetic spec: all fields must be positive");
  }
}

struct FieldMode {
  double amp = 0.0;
  Vector freq;
  double phase = 0.0;
};

/// One channel is a finite sum of cosine modes; the whole field is smooth
/// with Lipschitz constant at most sum_m |a_m| * ||w_m|| per channel.
using ChannelModes = std::vector<FieldMode>;

struct SyntheticField {
  std::vector<ChannelModes> channels;
};

inline double eval_channel(const ChannelModes& modes, const Eigen::RowVectorXd& x) {
  double v = 0.0;
  for (const FieldMode& m : modes) {
    v += m.amp * std::cos(m.freq.dot(x.transpose()) + m.phase);
  }
  return v;
}

inline double channel_lipschitz_bound(const ChannelModes& modes) {
  double bound = 0.0;
  for (const FieldMode& m : modes) bound += std::abs(m.amp) * m.freq.norm();
  return bound;
}

inline SyntheticField draw_field(const SyntheticSpec& spec, Rng& rng) {
  SyntheticField field;
  const double comp_max = spec.omega_max / std::sqrt(static_cast<double>(spec.d_x));
  for (Index c = 0; c < spec.d_f; ++c) {
    ChannelModes modes;
    for (Index m = 0; m < spec.n_modes; ++m) {
      FieldMode mode;
      mode.amp = rng.uniform(-spec.amplitude, spec.amplitude);
      mode.freq.resize(spec.d_x);
      for (Index d = 0; d < spec.d_x; ++d) mode.freq(d) = rng.uniform(-comp_max, comp_max);
      mode.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      modes.push_back(std::move(mode));
    }
    field.channels.push_back(std::move(modes));
  }
  return field;
}

/// Deterministic synthetic dataset: per sample, coordinates uniform in the
/// unit box followed by fresh per-channel cosine modes, all from one stream.
inline std::vector<FunctionSample> gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  Rng rng(seed);
  std::vector<FunctionSample> samples;
  samples.reserve(static_cast<std::size_t>(spec.n_samples));
  for (Index s = 0; s < spec.n_samples; ++s) {
    FunctionSample sample;
    sample.sample_id = "synth-" + std::to_string(s);
    sample.coords.resize(spec.points_per_sample, spec.d_x);
    for (Index p = 0; p < spec.points_per_sample; ++p) {
      for (Index d = 0; d < spec.d_x; ++d) sample.coords(p, d) = rng.uniform();
    }
    const SyntheticField field = draw_field(spec, rng);
    sample.values.resize(spec.points_per_sample, spec.d_f);
    for (Index p = 0; p < spec.points_per_sample; ++p) {
      for (Index c = 0; c < spec.d_f; ++c) {
        sample.values(p, c) =
            eval_channel(field.channels[static_cast<std::size_t>(c)], sample.coords.row(p));
      }
    }
    samples.push_back(std::move(sample));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Binary helpers
// ---------------------------------------------------------------------------

namespace detail {

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void append_rowmajor(std::string& blob, const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      char raw[sizeof(double)];
      std::memcpy(raw, &v, sizeof(double));
      blob.append(raw, sizeof(double));
    }
  }
}

inline void read_rowmajor(const std::string& blob, std::size_t& cursor, Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      double v;
      std::memcpy(&v, blob.data() + cursor, sizeof(double));
      cursor += sizeof(double);
      m(r, c) = v;
    }
  }
}

inline nlohmann::json parse_manifest(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& err) {
    throw ValidationError("malformed manifest " + path + ": " + err.what());
  }
}

template <typename T>
T manifest_get(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) {
    throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                          std::string("manifest: missing key '") + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                          std::string("manifest: bad value for key '") + key + "'");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset files: <name>.json manifest + <name>.bin blob
// ---------------------------------------------------------------------------

inline void save_dataset(const std::vector<FunctionSample>& samples, const std::string& base) {
  if (samples.empty()) throw ValidationError("save_dataset: no samples");
  const Index d_x = samples.front().domain_dim();
  const Index d_f = samples.front().value_dim();

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["kind"] = "dataset";
  manifest["dtype"] = "f64";
  manifest["byte_order"] = "little-endian";
  manifest["d_x"] = d_x;
  manifest["d_f"] = d_f;
  manifest["n_samples"] = samples.size();

  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const FunctionSample& s : samples) {
    if (s.domain_dim() != d_x || s.value_dim() != d_f) {
      throw ValidationError("save_dataset: inconsistent sample dimensions");
    }
    entries.push_back({{"id", s.sample_id},
                       {"n_points", s.n_points()},
                       {"offset", blob.size()}});
    detail::append_rowmajor(blob, s.coords);
    detail::append_rowmajor(blob, s.values);
  }
  manifest["samples"] = entries;

  detail::write_file(base + ".json", manifest.dump(2) + "\n");
  detail::write_file(base + ".bin", blob);
}

inline std::vector<FunctionSample> load_dataset(const std::string& base) {
  const nlohmann::json manifest = detail::parse_manifest(base + ".json");
  if (detail::manifest_get<int>(manifest, "version") != 1) {
    throw DataFormatError(DataFormatError::Kind::VersionMismatch,
                          "dataset manifest: unsupported version");
  }
  if (detail::manifest_get<std::string>(manifest, "dtype") != "f64" ||
      detail::manifest_get<std::string>(manifest, "byte_order") != "little-endian") {
    throw DataFormatError(DataFormatError::Kind::VersionMismatch,
                          "dataset manifest: unsupported dtype or byte order");
  }
  const Index d_x = detail::manifest_get<Index>(manifest, "d_x");
  const Index d_f = detail::manifest_get<Index>(manifest, "d_f");
  if (d_x < 1 || d_f < 0) {
    throw DataFormatError(DataFormatError::Kind::ShapeMismatch, "dataset manifest: bad dims");
  }
  const auto entries = detail::manifest_get<nlohmann::json>(manifest, "samples");
  if (entries.size() != detail::manifest_get<std::size_t>(manifest, "n_samples")) {
    throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                          "dataset manifest: n_samples disagrees with sample list");
  }

  // Validate offsets against declared shapes before touching the blob.
  std::size_t expected = 0;
  for (const auto& e : entries) {
    const Index n = detail::manifest_get<Index>(e, "n_points");
    const std::size_t offset = detail::manifest_get<std::size_t>(e, "offset");
    if (n < 2) {
      throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                            "dataset manifest: sample with fewer than 2 points");
    }
    if (offset != expected) {
      throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                            "dataset manifest: offsets inconsistent with declared shapes");
    }
    expected += static_cast<std::size_t>(n) * static_cast<std::size_t>(d_x + d_f) * sizeof(double);
  }

  const std::string blob = detail::read_file(base + ".bin");
  if (blob.size() < expected) {
    throw DataFormatError(DataFormatError::Kind::TruncatedBlob,
                          "dataset blob: " + std::to_string(blob.size()) + " bytes, expected " +
                              std::to_string(expected));
  }
  if (blob.size() > expected) {
    throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                          "dataset blob: longer than the manifest declares");
  }

  std::vector<FunctionSample> samples;
  std::size_t cursor = 0;
  for (const auto& e : entries) {
    FunctionSample s;
    s.sample_id = detail::manifest_get<std::string>(e, "id");
    const Index n = detail::manifest_get<Index>(e, "n_points");
    s.coords.resize(n, d_x);
    s.values.resize(n, d_f);
    detail::read_rowmajor(blob, cursor, s.coords);
    detail::read_rowmajor(blob, cursor, s.values);
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Checkpoint files: <name>.ckpt.json manifest + <name>.ckpt.bin blob
// ---------------------------------------------------------------------------

inline const char* to_string(AffinityNorm mode) {
  return mode == AffinityNorm::Row ? "row" : "row_excl_target";
}

inline AffinityNorm affinity_norm_from_string(const std::string& s) {
  if (s == "row") return AffinityNorm::Row;
  if (s == "row_excl_target") return AffinityNorm::RowExclTarget;
  throw ValidationError("unknown affinity_norm '" + s + "' (use row or row_excl_target)");
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"d_f", c.d_f},   {"d_x", c.d_x}, {"d_h", c.d_h},
          {"kw", c.kw},     {"kd", c.kd},   {"k", c.k},
          {"k_cross", c.k_cross}, {"T", c.T}, {"d_g", c.d_g},
          {"affinity_norm", to_string(c.affinity_norm)}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_f = detail::manifest_get<Index>(j, "d_f");
  c.d_x = detail::manifest_get<Index>(j, "d_x");
  c.d_h = detail::manifest_get<Index>(j, "d_h");
  c.kw = detail::manifest_get<Index>(j, "kw");
  c.kd = detail::manifest_get<Index>(j, "kd");
  c.k = detail::manifest_get<Index>(j, "k");
  c.k_cross = detail::manifest_get<Index>(j, "k_cross");
  c.T = detail::manifest_get<Index>(j, "T");
  c.d_g = detail::manifest_get<Index>(j, "d_g");
  c.affinity_norm = affinity_norm_from_string(detail::manifest_get<std::string>(j, "affinity_norm"));
  c.seed = detail::manifest_get<std::uint64_t>(j, "seed");
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},   {"lr0", c.lr0},
          {"beta1", c.beta1},     {"beta2", c.beta2},
          {"eps", c.eps},         {"weight_decay", c.weight_decay},
          {"lr_halve_every", c.lr_halve_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = detail::manifest_get<Index>(j, "epochs");
  c.lr0 = detail::manifest_get<double>(j, "lr0");
  c.beta1 = detail::manifest_get<double>(j, "beta1");
  c.beta2 = detail::manifest_get<double>(j, "beta2");
  c.eps = detail::manifest_get<double>(j, "eps");
  c.weight_decay = detail::manifest_get<double>(j, "weight_decay");
  c.lr_halve_every = detail::manifest_get<Index>(j, "lr_halve_every");
  return c;
}

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  std::uint64_t seed = 0;
  bool dual = false;
  ModelParams params;            // valid when !dual
  std::optional<DualParams> dual_params;
};

namespace detail {

template <typename Params>
void save_checkpoint_impl(Params& params, const ModelConfig& model_cfg,
                          const TrainConfig& train_cfg, std::uint64_t seed, bool dual,
                          const std::string& base) {
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["kind"] = "checkpoint";
  manifest["dual"] = dual;
  manifest["seed"] = seed;
  manifest["model_config"] = model_config_to_json(model_cfg);
  manifest["train_config"] = train_config_to_json(train_cfg);

  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for_each_tensor(params, [&tensors, &blob](const std::string& name, Matrix& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    append_rowmajor(blob, t);
  });
  manifest["tensors"] = tensors;

  write_file(base + ".ckpt.json", manifest.dump(2) + "\n");
  write_file(base + ".ckpt.bin", blob);
}

template <typename Params>
void load_tensors(Params& params, const nlohmann::json& tensors, const std::string& blob) {
  std::size_t idx = 0;
  std::size_t expected_bytes = 0;
  // Pass 1: the manifest must list exactly the expected tensors in order.
  for_each_tensor(params, [&](const std::string& name, Matrix& t) {
    if (idx >= tensors.size()) {
      throw DataFormatError(DataFormatError::Kind::LayoutMismatch,
                            "checkpoint manifest: missing tensor '" + name + "'");
    }
    const nlohmann::json& entry = tensors[idx++];
    if (manifest_get<std::string>(entry, "name") != name ||
        manifest_get<Index>(entry, "rows") != t.rows() ||
        manifest_get<Index>(entry, "cols") != t.cols()) {
      throw DataFormatError(DataFormatError::Kind::LayoutMismatch,
                            "checkpoint manifest: tensor '" + name +
                                "' missing, out of order, or of unexpected shape");
    }
    expected_bytes += static_cast<std::size_t>(t.size()) * sizeof(double);
  });
  if (idx != tensors.size()) {
    throw DataFormatError(DataFormatError::Kind::LayoutMismatch,
                          "checkpoint manifest: extra tensors listed");
  }
  if (blob.size() < expected_bytes) {
    throw DataFormatError(DataFormatError::Kind::TruncatedBlob,
                          "checkpoint blob: " + std::to_string(blob.size()) +
                              " bytes, expected " + std::to_string(expected_bytes));
  }
  if (blob.size() > expected_bytes) {
    throw DataFormatError(DataFormatError::Kind::ShapeMismatch,
                          "checkpoint blob: longer than the manifest declares");
  }
  std::size_t cursor = 0;
  for_each_tensor(params, [&blob, &cursor](const std::string&, Matrix& t) {
    read_rowmajor(blob, cursor, t);
  });
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& params, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, std::uint64_t seed,
                            const std::string& base) {
  ModelParams copy = params;
  detail::save_checkpoint_impl(copy, model_cfg, train_cfg, seed, false, base);
}

inline void save_dual_checkpoint(const DualParams& params, const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg, std::uint64_t seed,
                                 const std::string& base) {
  DualParams copy = params;
  detail::save_checkpoint_impl(copy, model_cfg, train_cfg, seed, true, base);
}

inline Checkpoint load_checkpoint(const std::string& base) {
  const nlohmann::json manifest = detail::parse_manifest(base + ".ckpt.json");
  if (detail::manifest_get<int>(manifest, "version") != 1) {
    throw DataFormatError(DataFormatError::Kind::VersionMismatch,
                          "checkpoint manifest: unsupported version");
  }
  Checkpoint ckpt;
  ckpt.model_config = model_config_from_json(detail::manifest_get<nlohmann::json>(manifest, "model_config"));
  ckpt.train_config = train_config_from_json(detail::manifest_get<nlohmann::json>(manifest, "train_config"));
  ckpt.seed = detail::manifest_get<std::uint64_t>(manifest, "seed");
  ckpt.dual = detail::manifest_get<bool>(manifest, "dual");

  const auto tensors = detail::manifest_get<nlohmann::json>(manifest, "tensors");
  const std::string blob = detail::read_file(base + ".ckpt.bin");
  if (ckpt.dual) {
    DualParams params = zero_dual_params(ckpt.model_config);
    detail::load_tensors(params, tensors, blob);
    ckpt.dual_params = std::move(params);
    ckpt.params = zero_params(ckpt.model_config);
  } else {
    ckpt.params = zero_params(ckpt.model_config);
    detail::load_tensors(ckpt.params, tensors, blob);
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_loss_csv(const std::string& path, const std::vector<double>& mean_loss,
                           const std::vector<double>& lr) {
  std::string csv = "epoch,mean_loss,lr\n";
  for (std::size_t e = 0; e < mean_loss.size(); ++e) {
    csv += std::to_string(e) + "," + detail::format_double(mean_loss[e]) + "," +
           detail::format_double(lr[e]) + "\n";
  }
  detail::write_file(path, csv);
}

/// Nearest-neighbor resampling of embeddings onto an R x R grid spanning the
/// coordinate bounding box (endpoints inclusive). CSV rows: gx,gy,z_1..z_dg.
inline std::string export_grid(const Matrix& coords, const Matrix& embeddings, Index resolution) {
  if (coords.cols() != 2) {
    throw ValidationError("export_grid: only 2-D domains are supported");
  }
  if (resolution < 2) throw ValidationError("export_grid: resolution must be >= 2");
  if (coords.rows() != embeddings.rows() || coords.rows() < 1) {
    throw ValidationError("export_grid: coords/embeddings mismatch");
  }

  NeighborIndex index(coords);
  const Eigen::RowVectorXd lo = coords.colwise().minCoeff();
  const Eigen::RowVectorXd hi = coords.colwise().maxCoeff();

  std::string csv = "gx,gy";
  for (Index c = 0; c < embeddings.cols(); ++c) csv += ",z_" + std::to_string(c + 1);
  csv += "\n";

  const double step_x = (hi(0) - lo(0)) / static_cast<double>(resolution - 1);
  const double step_y = (hi(1) - lo(1)) / static_cast<double>(resolution - 1);
  Eigen::RowVectorXd g(2);
  for (Index ix = 0; ix < resolution; ++ix) {
    g(0) = lo(0) + step_x * static_cast<double>(ix);
    for (Index iy = 0; iy < resolution; ++iy) {
      g(1) = lo(1) + step_y * static_cast<double>(iy);
      const Index nearest = index.nearest(g, 1)[0];
      csv += detail::format_double(g(0)) + "," + detail::format_double(g(1));
      for (Index c = 0; c < embeddings.cols(); ++c) {
        csv += "," + detail::format_double(embeddings(nearest, c));
      }
      csv += "\n";
    }
  }
  return csv;
}

}  // namespace nofe
