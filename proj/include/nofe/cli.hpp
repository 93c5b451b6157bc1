// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nofe/baselines.hpp"
#include "nofe/data.hpp"
#include "nofe/errors.hpp"
#include "nofe/experiments.hpp"
#include "nofe/graph.hpp"
#include "nofe/metrics.hpp"
#include "nofe/model.hpp"
#include "nofe/training.hpp"
#include "nofe/types.hpp"

#include <CLI11.hpp>

namespace nofe::cli {

// ---------------------------------------------------------------------------
// key=value configuration files, mirrored by --set overrides
// ---------------------------------------------------------------------------

class KeyValueConfig {
 public:
  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        // synthetic generator
        "d_x", "d_f", "n_modes", "omega_max", "amplitude", "points_per_sample", "n_samples",
        // model
        "d_h", "kw", "kd", "k", "k_cross", "T", "d_g", "affinity_norm",
        // training
        "epochs", "lr0", "beta1", "beta2", "eps", "weight_decay", "lr_halve_every"};
    return keys;
  }

  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file: " + path);
    KeyValueConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ValidationError(path + ":" + std::to_string(line_no) + ": expected key=value");
      }
      cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known_keys().contains(key)) {
      throw ValidationError("unknown config key '" + key + "'");
    }
    if (value.empty()) throw ValidationError("config key '" + key + "' has an empty value");
    kv_[key] = value;
  }

  void apply_overrides(const std::vector<std::string>& assignments) {
    for (const std::string& a : assignments) {
      const std::size_t eq = a.find('=');
      if (eq == std::string::npos) {
        throw ValidationError("--set expects key=value, got '" + a + "'");
      }
      set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
    }
  }

  bool has(const std::string& key) const { return kv_.contains(key); }

  Index get_index(const std::string& key) const {
    const std::string& raw = at(key);
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(raw, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != raw.size()) {
      throw ValidationError("config key '" + key + "': '" + raw + "' is not an integer");
    }
    return static_cast<Index>(v);
  }

  double get_double(const std::string& key) const {
    const std::string& raw = at(key);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(raw, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != raw.size()) {
      throw ValidationError("config key '" + key + "': '" + raw + "' is not a number");
    }
    return v;
  }

  std::string get_string(const std::string& key) const { return at(key); }

  Index get_index_or(const std::string& key, Index fallback) const {
    return has(key) ? get_index(key) : fallback;
  }
  double get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
  }

  void require(const std::vector<std::string>& keys, const std::string& context) const {
    for (const std::string& key : keys) {
      if (!has(key)) {
        throw ValidationError(context + ": required config key '" + key + "' is missing");
      }
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  const std::string& at(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ValidationError("required config key '" + key + "' is missing");
    return it->second;
  }

  std::map<std::string, std::string> kv_;
};

inline SyntheticSpec synthetic_spec_from(const KeyValueConfig& cfg) {
  cfg.require({"d_x", "d_f", "n_modes", "omega_max", "amplitude", "points_per_sample",
               "n_samples"},
              "gen");
  SyntheticSpec spec;
  spec.d_x = cfg.get_index("d_x");
  spec.d_f = cfg.get_index("d_f");
  spec.n_modes = cfg.get_index("n_modes");
  spec.omega_max = cfg.get_double("omega_max");
  spec.amplitude = cfg.get_double("amplitude");
  spec.points_per_sample = cfg.get_index("points_per_sample");
  spec.n_samples = cfg.get_index("n_samples");
  validate_spec(spec);
  return spec;
}

inline ModelConfig model_config_from(const KeyValueConfig& cfg, Index d_x, Index d_f) {
  cfg.require({"d_h", "kw", "kd", "k", "T", "d_g"}, "model config");
  for (const char* key : {"d_x", "d_f"}) {
    const Index dataset_value = key[2] == 'x' ? d_x : d_f;
    if (cfg.has(key) && cfg.get_index(key) != dataset_value) {
      throw ValidationError(std::string("config ") + key + "=" + std::to_string(cfg.get_index(key)) +
                            " does not match the dataset (" + std::to_string(dataset_value) + ")");
    }
  }
  ModelConfig m;
  m.d_x = d_x;
  m.d_f = d_f;
  m.d_h = cfg.get_index("d_h");
  m.kw = cfg.get_index("kw");
  m.kd = cfg.get_index("kd");
  m.k = cfg.get_index("k");
  m.k_cross = cfg.get_index_or("k_cross", m.k);
  m.T = cfg.get_index("T");
  m.d_g = cfg.get_index("d_g");
  if (cfg.has("affinity_norm")) {
    m.affinity_norm = affinity_norm_from_string(cfg.get_string("affinity_norm"));
  }
  validate_config(m);
  return m;
}

inline TrainConfig train_config_from(const KeyValueConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.get_index_or("epochs", t.epochs);
  t.lr0 = cfg.get_double_or("lr0", t.lr0);
  t.beta1 = cfg.get_double_or("beta1", t.beta1);
  t.beta2 = cfg.get_double_or("beta2", t.beta2);
  t.eps = cfg.get_double_or("eps", t.eps);
  t.weight_decay = cfg.get_double_or("weight_decay", t.weight_decay);
  t.lr_halve_every = cfg.get_index_or("lr_halve_every", t.lr_halve_every);
  validate_config(t);
  return t;
}

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix read_coords_file(const std::string& path, Index d_x) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open query-coordinate file: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    for (char& c : line) {
      if (c == ',') c = ' ';
    }
    std::istringstream fields(line);
    std::vector<double> row;
    double v;
    while (fields >> v) row.push_back(v);
    if (row.empty()) continue;
    if (static_cast<Index>(row.size()) != d_x) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(d_x) + " coordinates, got " +
                            std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValidationError(path + ": no query coordinates");
  Matrix coords(static_cast<Index>(rows.size()), d_x);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Index c = 0; c < d_x; ++c) coords(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
  }
  return coords;
}

inline void write_report(const MetricReport& report, const std::string& path_base,
                         const std::string& format) {
  if (format == "json") {
    nofe::detail::write_file(path_base + ".json", report_to_json(report).dump(2) + "\n");
  } else if (format == "text") {
    nofe::detail::write_file(path_base + ".txt", report_to_text(report));
  } else {
    throw ValidationError("--format must be json or text");
  }
}

inline Checkpoint load_point_checkpoint(const std::string& base) {
  Checkpoint ckpt = load_checkpoint(base);
  if (ckpt.dual) {
    throw ValidationError("checkpoint '" + base + "' holds a dual model; expected point-to-point");
  }
  return ckpt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string data;
  std::string model;
  std::string out;
  std::string format = "json";
};

inline KeyValueConfig load_config(const CommonArgs& args, bool file_required) {
  KeyValueConfig cfg;
  if (!args.config_path.empty()) {
    cfg = KeyValueConfig::from_file(args.config_path);
  } else if (file_required) {
    throw ValidationError("--config is required for this subcommand");
  }
  cfg.apply_overrides(args.overrides);
  return cfg;
}

inline int cmd_gen(const CommonArgs& args) {
  const KeyValueConfig cfg = load_config(args, true);
  const SyntheticSpec spec = synthetic_spec_from(cfg);
  const std::vector<FunctionSample> samples = gen_synthetic(spec, args.seed);
  save_dataset(samples, args.out);
  std::cout << "wrote " << samples.size() << " samples to " << args.out << ".json/.bin\n";
  return 0;
}

inline int cmd_train(const CommonArgs& args) {
  const KeyValueConfig cfg = load_config(args, true);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);
  ModelConfig model_cfg =
      model_config_from(cfg, dataset.front().domain_dim(), dataset.front().value_dim());
  model_cfg.seed = args.seed;
  const TrainConfig train_cfg = train_config_from(cfg);

  const TrainResult result = train(dataset, model_cfg, train_cfg, args.seed);
  save_checkpoint(result.params, model_cfg, train_cfg, args.seed, args.out);
  write_loss_csv(args.out + ".loss.csv", result.epoch_mean_loss, result.epoch_lr);
  std::cout << "trained " << train_cfg.epochs << " epochs; first mean loss "
            << result.epoch_mean_loss.front() << ", last " << result.epoch_mean_loss.back()
            << "; wrote " << args.out << ".ckpt.json/.bin and " << args.out << ".loss.csv\n";
  return 0;
}

inline int cmd_embed(const CommonArgs& args) {
  const Checkpoint ckpt = detail::load_point_checkpoint(args.model);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);

  std::string csv = "sample,point";
  for (Index d = 0; d < ckpt.model_config.d_x; ++d) csv += ",x_" + std::to_string(d + 1);
  for (Index c = 0; c < ckpt.model_config.d_g; ++c) csv += ",z_" + std::to_string(c + 1);
  csv += "\n";

  for (const FunctionSample& s : dataset) {
    const DomainGraph graph = build_knn_graph(s, ckpt.model_config.k);
    const Matrix z = forward(ckpt.params, graph, s.values, ckpt.model_config);
    for (Index p = 0; p < s.n_points(); ++p) {
      csv += s.sample_id + "," + std::to_string(p);
      for (Index d = 0; d < s.domain_dim(); ++d) {
        csv += "," + nofe::detail::format_double(s.coords(p, d));
      }
      for (Index c = 0; c < z.cols(); ++c) {
        csv += "," + nofe::detail::format_double(z(p, c));
      }
      csv += "\n";
    }
  }
  nofe::detail::write_file(args.out, csv);
  std::cout << "wrote embeddings for " << dataset.size() << " samples to " << args.out << "\n";
  return 0;
}

struct SuperresArgs {
  Index n_input = 100;
  Index n_query = 1000;
  Index sample = 0;
  std::string query_file;
  Index finetune_epochs = 0;
};

inline int cmd_superres(const CommonArgs& args, const SuperresArgs& sr) {
  const Checkpoint ckpt = load_checkpoint(args.model);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);
  if (sr.sample < 0 || sr.sample >= static_cast<Index>(dataset.size())) {
    throw ValidationError("--sample out of range");
  }
  const FunctionSample& full = dataset[static_cast<std::size_t>(sr.sample)];
  const ModelConfig& mc = ckpt.model_config;

  if (sr.n_input < mc.k + 1 || sr.n_input > full.n_points()) {
    throw ValidationError("--n-input out of range for this sample");
  }

  // Seeded choice of input points from the sample.
  Rng rng(args.seed);
  std::vector<Index> perm(static_cast<std::size_t>(full.n_points()));
  std::iota(perm.begin(), perm.end(), Index{0});
  rng.shuffle(perm);
  FunctionSample source;
  source.sample_id = full.sample_id + ":input";
  source.coords.resize(sr.n_input, full.domain_dim());
  source.values.resize(sr.n_input, full.value_dim());
  for (Index r = 0; r < sr.n_input; ++r) {
    source.coords.row(r) = full.coords.row(perm[static_cast<std::size_t>(r)]);
    source.values.row(r) = full.values.row(perm[static_cast<std::size_t>(r)]);
  }

  Matrix queries;
  if (!sr.query_file.empty()) {
    queries = detail::read_coords_file(sr.query_file, mc.d_x);
  } else {
    if (sr.n_query < mc.k + 1) throw ValidationError("--n-query too small for the query graph");
    const Eigen::RowVectorXd lo = full.coords.colwise().minCoeff();
    const Eigen::RowVectorXd hi = full.coords.colwise().maxCoeff();
    queries.resize(sr.n_query, mc.d_x);
    Rng qrng = Rng(args.seed).child(7);
    for (Index q = 0; q < sr.n_query; ++q) {
      for (Index d = 0; d < mc.d_x; ++d) queries(q, d) = qrng.uniform(lo(d), hi(d));
    }
  }

  DualParams params =
      ckpt.dual ? *ckpt.dual_params : dual_from_point_model(ckpt.params);
  if (sr.finetune_epochs > 0) {
    if (ckpt.dual) {
      throw ValidationError("--finetune-epochs needs a point-to-point checkpoint to seed from");
    }
    TrainConfig ft = ckpt.train_config;
    ft.epochs = sr.finetune_epochs;
    const DualTrainResult tuned = train_dual(dataset, ckpt.params, mc, ft, args.seed);
    params = tuned.params;
  }

  const DualGraph dual = build_dual_graph(source, queries, mc.k, mc.k_cross);
  const Matrix z = forward_dual(params, dual, mc);

  std::string csv;
  for (Index d = 0; d < mc.d_x; ++d) csv += (d ? "," : "") + ("x_" + std::to_string(d + 1));
  for (Index c = 0; c < mc.d_g; ++c) csv += ",z_" + std::to_string(c + 1);
  csv += "\n";
  for (Index q = 0; q < queries.rows(); ++q) {
    for (Index d = 0; d < mc.d_x; ++d) {
      csv += (d ? "," : "") + nofe::detail::format_double(queries(q, d));
    }
    for (Index c = 0; c < z.cols(); ++c) csv += "," + nofe::detail::format_double(z(q, c));
    csv += "\n";
  }
  nofe::detail::write_file(args.out, csv);
  std::cout << "wrote " << queries.rows() << " query embeddings to " << args.out << "\n";
  return 0;
}

inline int cmd_eval(const CommonArgs& args) {
  const Checkpoint ckpt = detail::load_point_checkpoint(args.model);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);
  const ModelConfig& mc = ckpt.model_config;

  MetricReport nofe_report, pca_report;
  double n_stress1 = 0, n_stress_local = 0, p_stress1 = 0, p_stress_local = 0;
  std::vector<double> n_corr_sum, p_corr_sum;
  std::vector<Index> n_corr_count, p_corr_count;

  for (const FunctionSample& s : dataset) {
    const DomainGraph graph = build_knn_graph(s, mc.k);
    const Matrix z_nofe = forward(ckpt.params, graph, s.values, mc);
    const PcaModel pca = pca_fit(s.values, mc.d_g);
    const Matrix z_pca = pca_transform(pca, s.values);

    n_stress1 += stress1(s.values, z_nofe);
    n_stress_local += stress_local(graph, s.values, z_nofe);
    p_stress1 += stress1(s.values, z_pca);
    p_stress_local += stress_local(graph, s.values, z_pca);

    const LipschitzResult ln = lipschitz_ratios(graph, s.values, z_nofe);
    const LipschitzResult lp = lipschitz_ratios(graph, s.values, z_pca);
    nofe_report.lipschitz_ratios.insert(nofe_report.lipschitz_ratios.end(), ln.ratios.begin(),
                                        ln.ratios.end());
    nofe_report.lipschitz_skipped += ln.skipped;
    pca_report.lipschitz_ratios.insert(pca_report.lipschitz_ratios.end(), lp.ratios.begin(),
                                       lp.ratios.end());
    pca_report.lipschitz_skipped += lp.skipped;

    auto accumulate_corr = [](std::vector<double>& sum, std::vector<Index>& count,
                              const std::vector<double>& corr) {
      if (sum.empty()) {
        sum.assign(corr.size(), 0.0);
        count.assign(corr.size(), 0);
      }
      for (std::size_t c = 0; c < corr.size(); ++c) {
        if (!std::isnan(corr[c])) {
          sum[c] += corr[c];
          ++count[c];
        }
      }
    };
    accumulate_corr(n_corr_sum, n_corr_count, grayscale_correlation(z_nofe, s.values));
    accumulate_corr(p_corr_sum, p_corr_count, grayscale_correlation(z_pca, s.values));
  }

  const double n = static_cast<double>(dataset.size());
  nofe_report.stress1 = n_stress1 / n;
  nofe_report.stress_local = n_stress_local / n;
  pca_report.stress1 = p_stress1 / n;
  pca_report.stress_local = p_stress_local / n;
  auto finish_corr = [](const std::vector<double>& sum, const std::vector<Index>& count) {
    std::vector<double> out(sum.size());
    for (std::size_t c = 0; c < sum.size(); ++c) {
      out[c] = count[c] > 0 ? sum[c] / static_cast<double>(count[c])
                            : std::numeric_limits<double>::quiet_NaN();
    }
    return out;
  };
  nofe_report.grayscale_corr = finish_corr(n_corr_sum, n_corr_count);
  pca_report.grayscale_corr = finish_corr(p_corr_sum, p_corr_count);

  detail::write_report(nofe_report, args.out + ".nofe", args.format);
  detail::write_report(pca_report, args.out + ".pca", args.format);
  std::cout << "stress_local nofe=" << nofe_report.stress_local
            << " pca=" << pca_report.stress_local << "; reports at " << args.out << ".{nofe,pca}\n";
  return 0;
}

inline int cmd_patch_exp(const CommonArgs& args, double border_width) {
  const Checkpoint ckpt = detail::load_point_checkpoint(args.model);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);
  const ModelConfig& mc = ckpt.model_config;

  MetricReport nofe_report, pca_report;
  double n_region = 0, n_local = 0, p_region = 0, p_local = 0;
  for (const FunctionSample& s : dataset) {
    const std::vector<int> assign = quadrant_assignment(s.coords);
    const Matrix z_nofe = embed_subsets(s, assign, 4, [&](const FunctionSample& sub) {
      const DomainGraph graph = build_knn_graph(sub, mc.k);
      return forward(ckpt.params, graph, sub.values, mc);
    });
    const Matrix z_pca = embed_subsets(s, assign, 4, [&](const FunctionSample& sub) {
      return pca_transform(pca_fit(sub.values, mc.d_g), sub.values);
    });
    const QuadrantStitching qn = quadrant_stitching_error(s.coords, z_nofe, assign, border_width);
    const QuadrantStitching qp = quadrant_stitching_error(s.coords, z_pca, assign, border_width);
    n_region += qn.se_region;
    n_local += qn.se_local;
    p_region += qp.se_region;
    p_local += qp.se_local;
  }
  const double n = static_cast<double>(dataset.size());
  nofe_report.se_region = n_region / n;
  nofe_report.se_local = n_local / n;
  pca_report.se_region = p_region / n;
  pca_report.se_local = p_local / n;

  detail::write_report(nofe_report, args.out + ".nofe", args.format);
  detail::write_report(pca_report, args.out + ".pca", args.format);
  std::cout << "se_region nofe=" << nofe_report.se_region << " pca=" << pca_report.se_region
            << "; se_local nofe=" << nofe_report.se_local << " pca=" << pca_report.se_local
            << "\n";
  return 0;
}

inline int cmd_glue_exp(const CommonArgs& args, double overlap_lo, double overlap_hi) {
  const Checkpoint ckpt = detail::load_point_checkpoint(args.model);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);
  const ModelConfig& mc = ckpt.model_config;
  if (!(0.0 < overlap_lo && overlap_lo < overlap_hi && overlap_hi < 1.0)) {
    throw ValidationError("--overlap-lo/--overlap-hi must satisfy 0 < lo < hi < 1");
  }

  MetricReport nofe_report, pca_report;
  double n_mse = 0, p_mse = 0;
  for (const FunctionSample& s : dataset) {
    const double lo_x = s.coords.col(0).minCoeff();
    const double hi_x = s.coords.col(0).maxCoeff();
    const double lo_band = lo_x + overlap_lo * (hi_x - lo_x);
    const double hi_band = lo_x + overlap_hi * (hi_x - lo_x);
    const OverlapSplit split = make_overlap_split(s.coords, 0, lo_band, hi_band);

    auto take_rows = [&s](const std::vector<Index>& rows, const std::string& suffix) {
      FunctionSample sub;
      sub.sample_id = s.sample_id + suffix;
      sub.coords.resize(static_cast<Index>(rows.size()), s.domain_dim());
      sub.values.resize(static_cast<Index>(rows.size()), s.value_dim());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        sub.coords.row(static_cast<Index>(r)) = s.coords.row(rows[r]);
        sub.values.row(static_cast<Index>(r)) = s.values.row(rows[r]);
      }
      return sub;
    };
    const FunctionSample patch_a = take_rows(split.rows_a, ":A");
    const FunctionSample patch_b = take_rows(split.rows_b, ":B");

    auto nofe_embed = [&](const FunctionSample& sub) {
      const DomainGraph graph = build_knn_graph(sub, mc.k);
      return forward(ckpt.params, graph, sub.values, mc);
    };
    n_mse += glue_mse_full_patch(nofe_embed(patch_a), nofe_embed(patch_b), split);
    p_mse += glue_mse_full_patch(pca_transform(pca_fit(patch_a.values, mc.d_g), patch_a.values),
                                 pca_transform(pca_fit(patch_b.values, mc.d_g), patch_b.values),
                                 split);
  }
  const double n = static_cast<double>(dataset.size());
  nofe_report.gluing_mse = n_mse / n;
  pca_report.gluing_mse = p_mse / n;

  detail::write_report(nofe_report, args.out + ".nofe", args.format);
  detail::write_report(pca_report, args.out + ".pca", args.format);
  std::cout << "gluing_mse nofe=" << nofe_report.gluing_mse << " pca=" << pca_report.gluing_mse
            << "\n";
  return 0;
}

inline int cmd_export(const CommonArgs& args, Index sample, Index resolution) {
  const Checkpoint ckpt = detail::load_point_checkpoint(args.model);
  const std::vector<FunctionSample> dataset = load_dataset(args.data);
  if (sample < 0 || sample >= static_cast<Index>(dataset.size())) {
    throw ValidationError("--sample out of range");
  }
  const FunctionSample& s = dataset[static_cast<std::size_t>(sample)];
  const DomainGraph graph = build_knn_graph(s, ckpt.model_config.k);
  const Matrix z = forward(ckpt.params, graph, s.values, ckpt.model_config);
  nofe::detail::write_file(args.out, export_grid(s.coords, z, resolution));
  std::cout << "wrote " << resolution << "x" << resolution << " grid to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& argv) {
  CLI::App app{"neural operator function embeddings over continuous domains"};
  app.require_subcommand(1);

  int threads = 1;
  app.add_option("--threads", threads, "cap on worker threads")->capture_default_str();

  CommonArgs args;
  SuperresArgs sr;
  Index export_sample = 0;
  Index export_resolution = 64;
  double border_width = 0.1;
  double overlap_lo = 0.3;
  double overlap_hi = 0.7;

  auto add_common = [&args](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", args.config_path, "key=value config file");
      sub->add_option("--set", args.overrides, "override a config key (key=value)");
    }
    sub->add_option("--seed", args.seed, "seed for all randomness")->capture_default_str();
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, true);
  gen->add_option("--out", args.out, "output dataset base path")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "train the operator on a dataset");
  add_common(train_cmd, true);
  train_cmd->add_option("--data", args.data, "dataset base path")->required();
  train_cmd->add_option("--out", args.out, "output checkpoint base path")->required();

  CLI::App* embed = app.add_subcommand("embed", "embed dataset points with a trained model");
  add_common(embed, false);
  embed->add_option("--model", args.model, "checkpoint base path")->required();
  embed->add_option("--data", args.data, "dataset base path")->required();
  embed->add_option("--out", args.out, "output CSV path")->required();

  CLI::App* superres =
      app.add_subcommand("superres", "predict embeddings at query locations (dual graph)");
  add_common(superres, false);
  superres->add_option("--model", args.model, "checkpoint base path")->required();
  superres->add_option("--data", args.data, "dataset base path")->required();
  superres->add_option("--out", args.out, "output CSV path")->required();
  superres->add_option("--n-input", sr.n_input, "number of source points drawn from the sample")
      ->capture_default_str();
  superres->add_option("--n-query", sr.n_query, "number of random query locations")
      ->capture_default_str();
  superres->add_option("--queries", sr.query_file, "file of query coordinates (one point per line)");
  superres->add_option("--sample", sr.sample, "sample index")->capture_default_str();
  superres->add_option("--finetune-epochs", sr.finetune_epochs,
                       "self-supervised dual fine-tuning epochs before inference")
      ->capture_default_str();

  CLI::App* eval = app.add_subcommand("eval", "metric report for the model vs a PCA baseline");
  add_common(eval, false);
  eval->add_option("--model", args.model, "checkpoint base path")->required();
  eval->add_option("--data", args.data, "held-out dataset base path")->required();
  eval->add_option("--out", args.out, "report base path")->required();
  eval->add_option("--format", args.format, "json or text")->capture_default_str();

  CLI::App* patch = app.add_subcommand("patch-exp", "4-quadrant independent-embedding experiment");
  add_common(patch, false);
  patch->add_option("--model", args.model, "checkpoint base path")->required();
  patch->add_option("--data", args.data, "dataset base path")->required();
  patch->add_option("--out", args.out, "report base path")->required();
  patch->add_option("--border-width", border_width, "border band width (domain units)")
      ->capture_default_str();
  patch->add_option("--format", args.format, "json or text")->capture_default_str();

  CLI::App* glue = app.add_subcommand("glue-exp", "two-overlapping-patch gluing experiment");
  add_common(glue, false);
  glue->add_option("--model", args.model, "checkpoint base path")->required();
  glue->add_option("--data", args.data, "dataset base path")->required();
  glue->add_option("--out", args.out, "report base path")->required();
  glue->add_option("--overlap-lo", overlap_lo, "overlap band start (fraction of x extent)")
      ->capture_default_str();
  glue->add_option("--overlap-hi", overlap_hi, "overlap band end (fraction of x extent)")
      ->capture_default_str();
  glue->add_option("--format", args.format, "json or text")->capture_default_str();

  CLI::App* export_cmd = app.add_subcommand("export", "nearest-neighbor grid CSV of embeddings");
  add_common(export_cmd, false);
  export_cmd->add_option("--model", args.model, "checkpoint base path")->required();
  export_cmd->add_option("--data", args.data, "dataset base path")->required();
  export_cmd->add_option("--out", args.out, "output CSV path")->required();
  export_cmd->add_option("--sample", export_sample, "sample index")->capture_default_str();
  export_cmd->add_option("--resolution", export_resolution, "grid resolution R (R x R)")
      ->capture_default_str();

  std::vector<char*> c_argv;
  std::vector<std::string> storage;
  storage.reserve(argv.size() + 1);
  storage.push_back("nofe");
  for (const std::string& a : argv) storage.push_back(a);
  for (std::string& s : storage) c_argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(c_argv.size()), c_argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  set_num_threads(threads);
  try {
    if (gen->parsed()) return cmd_gen(args);
    if (train_cmd->parsed()) return cmd_train(args);
    if (embed->parsed()) return cmd_embed(args);
    if (superres->parsed()) return cmd_superres(args, sr);
    if (eval->parsed()) return cmd_eval(args);
    if (patch->parsed()) return cmd_patch_exp(args, border_width);
    if (glue->parsed()) return cmd_glue_exp(args, overlap_lo, overlap_hi);
    if (export_cmd->parsed()) return cmd_export(args, export_sample, export_resolution);
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return 2;
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace nofe::cli
