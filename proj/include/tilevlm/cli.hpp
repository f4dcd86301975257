#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tilevlm/checkpoint.hpp"
#include "tilevlm/dataset.hpp"
#include "tilevlm/dcl.hpp"
#include "tilevlm/manifest.hpp"
#include "tilevlm/metrics.hpp"
#include "tilevlm/png.hpp"
#include "tilevlm/quant.hpp"
#include "tilevlm/runtime.hpp"
#include "tilevlm/vrc.hpp"

namespace tvlm {

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string default_manifest(const std::string& primary_out, const std::string& cmd) {
  return primary_out.empty() ? cmd + ".manifest.json" : primary_out + ".manifest.json";
}

}  // namespace detail

// Run one subcommand in-process. args holds the tokens after the program
// name. Exit codes: 0 success, 1 engine/contract failure, 2 usage mistake.
inline int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"tile-serial vision-language engine"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "print every flag of every subcommand");

  struct {
    std::uint64_t seed = 42;
    std::string out;
    std::string manifest_path;
    std::string config_path;
    std::size_t tile_size = 32;
    std::size_t max_tiles = 8;
    // training
    std::size_t samples = 50;
    std::size_t steps = 200;
    double lambda = 1.0;
    double temperature = 1.0;
    std::size_t period = 1;
    double lr = 0.05;
    std::string log_path;
    // vrc
    std::string ckpt;
    std::string labels_path;
    double eps = 1.05;
    std::size_t probe_side = 64;
    std::size_t epochs = 30;
    std::string branch = "large";
    // infer
    std::string image_path;
    std::string prompt = "caption:";
    std::string vrc_mode = "off";
    std::string vrc_ckpt;
    double vrc_alpha = 1.0;
    std::size_t max_new = 16;
    // quantize
    std::size_t group = 32;
    // bench
    std::string resolutions = "64,128,256,512";
    std::string modes = "serial,global";
    bool timing = false;
    std::uint64_t global_cap = std::uint64_t{1} << 30;
    // score
    std::string metric;
    std::string pred_path;
    std::string truth_path;
  } o;

  auto add_config_flags = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "flat key-value settings file");
    sub->add_option("--manifest", o.manifest_path, "where to write the run manifest");
  };
  auto add_geometry_flags = [&](CLI::App* sub) {
    sub->add_option("--tile-size", o.tile_size, "square tile side in pixels")->capture_default_str();
    sub->add_option("--max-tiles", o.max_tiles, "tiling budget per image")->capture_default_str();
  };

  CLI::App* c_init = app.add_subcommand("init", "create a freshly seeded model checkpoint");
  c_init->add_option("--seed", o.seed, "master seed; all streams derive from it")->capture_default_str();
  c_init->add_option("--out", o.out, "checkpoint path")->required();
  add_geometry_flags(c_init);
  add_config_flags(c_init);

  CLI::App* c_dcl = app.add_subcommand("train-dcl", "alternating two-branch training with distillation");
  c_dcl->add_option("--seed", o.seed, "master seed")->capture_default_str();
  c_dcl->add_option("--samples", o.samples, "synthetic caption set size")->capture_default_str();
  c_dcl->add_option("--steps", o.steps, "optimizer steps")->capture_default_str();
  c_dcl->add_option("--lambda", o.lambda, "distillation weight (0 disables)")->capture_default_str();
  c_dcl->add_option("--temperature", o.temperature, "distillation temperature")->capture_default_str();
  c_dcl->add_option("--period", o.period, "branch alternation period in steps")->capture_default_str();
  c_dcl->add_option("--lr", o.lr, "SGD learning rate")->capture_default_str();
  c_dcl->add_option("--out", o.out, "checkpoint path")->required();
  c_dcl->add_option("--log", o.log_path, "per-step CSV (step,branch,ce,kd)");
  add_geometry_flags(c_dcl);
  add_config_flags(c_dcl);

  CLI::App* c_label = app.add_subcommand("label-vrc", "label compression ratios with the loss oracle");
  c_label->add_option("--ckpt", o.ckpt, "trained model checkpoint")->required();
  c_label->add_option("--seed", o.seed, "seed for the synthetic image set")->capture_default_str();
  c_label->add_option("--samples", o.samples, "set size")->capture_default_str();
  c_label->add_option("--eps", o.eps, "acceptable loss-ratio threshold (>= 1)")->capture_default_str();
  c_label->add_option("--branch", o.branch, "encoder branch for the oracle losses")
      ->check(CLI::IsMember({"small", "large"}))
      ->capture_default_str();
  c_label->add_option("--probe-side", o.probe_side, "probe input side for label normalization")
      ->capture_default_str();
  c_label->add_option("--out", o.out, "label table path (TSV)")->required();
  add_config_flags(c_label);

  CLI::App* c_tvrc = app.add_subcommand("train-vrc", "fit the ratio predictor to oracle labels");
  c_tvrc->add_option("--labels", o.labels_path, "label table from label-vrc")->required();
  c_tvrc->add_option("--seed", o.seed, "seed that generated the labeled images")->capture_default_str();
  c_tvrc->add_option("--samples", o.samples, "set size (must match the label run)")->capture_default_str();
  c_tvrc->add_option("--epochs", o.epochs, "training epochs")->capture_default_str();
  c_tvrc->add_option("--lr", o.lr, "SGD learning rate")->capture_default_str();
  c_tvrc->add_option("--probe-side", o.probe_side, "probe input side")->capture_default_str();
  c_tvrc->add_option("--out", o.out, "predictor checkpoint path")->required();
  add_config_flags(c_tvrc);

  CLI::App* c_infer = app.add_subcommand("infer", "caption one image");
  c_infer->add_option("--ckpt", o.ckpt, "model checkpoint")->required();
  c_infer->add_option("--image", o.image_path, "PNG or native raster")->required();
  c_infer->add_option("--prompt", o.prompt, "prompt text")->capture_default_str();
  c_infer->add_option("--branch", o.branch, "encoder branch")
      ->check(CLI::IsMember({"small", "large"}))
      ->capture_default_str();
  c_infer->add_option("--vrc", o.vrc_mode, "resolution compression on|off")
      ->check(CLI::IsMember({"on", "off"}));
  c_infer->add_option("--vrc-ckpt", o.vrc_ckpt, "ratio predictor checkpoint");
  c_infer->add_option("--vrc-alpha", o.vrc_alpha, "force this compression ratio instead of predicting");
  c_infer->add_option("--max-new", o.max_new, "decoding budget in bytes")->capture_default_str();
  c_infer->add_option("--out", o.out, "write the answer to this file too");
  add_config_flags(c_infer);

  CLI::App* c_quant = app.add_subcommand("quantize", "rewrite a checkpoint with 4-bit weights");
  c_quant->add_option("--ckpt", o.ckpt, "input checkpoint")->required();
  c_quant->add_option("--out", o.out, "quantized checkpoint path")->required();
  c_quant->add_option("--group", o.group, "quantization group size")->capture_default_str();
  add_config_flags(c_quant);

  CLI::App* c_bench = app.add_subcommand("bench", "count flops/workspace across resolutions");
  c_bench->add_option("--seed", o.seed, "seed for the in-memory model")->capture_default_str();
  c_bench->add_option("--resolutions", o.resolutions, "comma list, W or WxH")->capture_default_str();
  c_bench->add_option("--modes", o.modes, "comma subset of serial,global")->capture_default_str();
  c_bench->add_option("--branch", o.branch, "encoder branch")
      ->check(CLI::IsMember({"small", "large"}))
      ->capture_default_str();
  c_bench->add_flag("--timing", o.timing, "fill the wall_ms column (breaks replay determinism)");
  c_bench->add_option("--global-cap", o.global_cap, "attention workspace budget in bytes")
      ->capture_default_str();
  c_bench->add_option("--out", o.out, "report CSV path")->required();
  add_geometry_flags(c_bench);
  add_config_flags(c_bench);

  CLI::App* c_score = app.add_subcommand("score", "evaluate predictions against truth");
  c_score->add_option("--metric", o.metric, "f1, p@10, or field-acc")->required();
  c_score->add_option("--pred", o.pred_path, "prediction CSV (id,value)")->required();
  c_score->add_option("--truth", o.truth_path, "truth CSV (id,value)")->required();
  c_score->add_option("--out", o.out, "write the metric value to this file too");
  add_config_flags(c_score);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  auto effective = [&](CLI::App* sub) {
    RunConfig rc;
    if (!o.config_path.empty()) rc = load_run_config(o.config_path);
    auto overridden = [&](const char* flag) {
      const CLI::Option* op = sub->get_option_no_throw(flag);
      return op != nullptr && op->count() > 0;
    };
    if (overridden("--tile-size")) rc.tile_size = o.tile_size;
    if (overridden("--max-tiles")) rc.max_tiles = o.max_tiles;
    if (overridden("--branch")) rc.branch = o.branch;
    if (overridden("--vrc")) rc.vrc_enabled = o.vrc_mode == "on";
    if (overridden("--eps")) rc.vrc_eps = o.eps;
    if (overridden("--group")) rc.quant_group = o.group;
    return rc;
  };

  auto base_manifest = [&](const RunConfig& rc, bool with_seed) {
    RunManifest m;
    m.command = args;
    m.has_seed = with_seed;
    m.seed = o.seed;
    m.config["tile_size"] = std::to_string(rc.tile_size);
    m.config["max_tiles"] = std::to_string(rc.max_tiles);
    m.config["branch"] = rc.branch;
    m.config["vrc.enabled"] = rc.vrc_enabled ? "true" : "false";
    m.config["vrc.eps"] = detail::fmt_double(rc.vrc_eps);
    m.config["quant.group"] = std::to_string(rc.quant_group);
    return m;
  };

  auto engine_cfg = [&](const RunConfig& rc) {
    EngineConfig ec;
    ec.tile_size = rc.tile_size;
    ec.max_tiles = rc.max_tiles;
    ec.seed = o.seed;
    return ec;
  };

  try {
    if (c_init->parsed()) {
      RunConfig rc = effective(c_init);
      Engine engine(engine_cfg(rc));
      save_engine(o.out, engine);
      RunManifest m = base_manifest(rc, true);
      m.outputs[o.out] = digest_file(o.out);
      save_manifest(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
      std::cout << "wrote " << o.out << '\n';
      return 0;
    }

    if (c_dcl->parsed()) {
      RunConfig rc = effective(c_dcl);
      Engine engine(engine_cfg(rc));
      std::vector<CaptionSample> set = make_caption_set(o.samples, o.seed);
      DclOptions d;
      d.lambda = o.lambda;
      d.temperature = o.temperature;
      d.period = o.period;
      d.lr = o.lr;
      std::vector<DclStepStats> log = run_dcl_training(engine, set, o.steps, d);
      save_engine(o.out, engine);
      RunManifest m = base_manifest(rc, true);
      m.config["samples"] = std::to_string(o.samples);
      m.config["steps"] = std::to_string(o.steps);
      m.config["lambda"] = detail::fmt_double(o.lambda);
      m.config["temperature"] = detail::fmt_double(o.temperature);
      m.config["period"] = std::to_string(o.period);
      m.config["lr"] = detail::fmt_double(o.lr);
      m.outputs[o.out] = digest_file(o.out);
      if (!o.log_path.empty()) {
        std::ofstream os(o.log_path);
        if (!os) throw EngineError("cannot open " + o.log_path + " for writing");
        os << "step,branch,ce,kd\n";
        for (const DclStepStats& s : log)
          os << s.step << ',' << branch_name(s.branch) << ',' << detail::fmt_double(s.ce) << ','
             << detail::fmt_double(s.kd) << '\n';
        if (!os) throw EngineError("failed writing " + o.log_path);
        m.outputs[o.log_path] = digest_file(o.log_path);
      }
      save_manifest(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
      std::cout << "trained " << o.steps << " steps, final ce " << detail::fmt_double(log.back().ce)
                << '\n';
      return 0;
    }

    if (c_label->parsed()) {
      RunConfig rc = effective(c_label);
      Engine engine = load_engine(o.ckpt);
      std::vector<CaptionSample> set = make_vrc_set(o.samples, o.seed);
      Branch b = parse_branch(c_label->count("--branch") ? o.branch : "small");
      std::vector<VrcLabel> labels;
      labels.reserve(set.size());
      for (std::size_t i = 0; i < set.size(); ++i) {
        const CaptionSample& s = set[i];
        AlphaDecision d =
            label_alpha(engine, s.image, s.prompt, s.answer, b, rc.vrc_eps, default_alpha_grid(),
                        o.probe_side);
        labels.push_back({"s" + std::to_string(i), s.image.width, s.image.height, d.alpha_star,
                          d.alpha_prime});
      }
      save_vrc_labels(o.out, labels);
      RunManifest m = base_manifest(rc, true);
      m.config["branch"] = branch_name(b);
      m.config["samples"] = std::to_string(o.samples);
      m.config["probe_side"] = std::to_string(o.probe_side);
      m.outputs[o.out] = digest_file(o.out);
      save_manifest(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
      std::cout << "labeled " << labels.size() << " samples\n";
      return 0;
    }

    if (c_tvrc->parsed()) {
      RunConfig rc = effective(c_tvrc);
      std::vector<VrcLabel> labels = load_vrc_labels(o.labels_path);
      std::vector<CaptionSample> set = make_vrc_set(o.samples, o.seed);
      if (labels.size() != set.size())
        throw ContractError("label table has " + std::to_string(labels.size()) + " rows but --samples " +
                            std::to_string(o.samples) + " regenerates " + std::to_string(set.size()));
      std::vector<VrcTrainItem> items;
      items.reserve(set.size());
      for (std::size_t i = 0; i < set.size(); ++i)
        items.push_back({set[i].image, labels[i].alpha_prime});
      VrcNet net(o.probe_side, o.seed);
      std::vector<double> losses = train_vrc(net, items, o.epochs, o.lr);
      save_vrc(o.out, net);
      RunManifest m = base_manifest(rc, true);
      m.config["epochs"] = std::to_string(o.epochs);
      m.config["lr"] = detail::fmt_double(o.lr);
      m.config["probe_side"] = std::to_string(o.probe_side);
      m.config["samples"] = std::to_string(o.samples);
      m.outputs[o.out] = digest_file(o.out);
      save_manifest(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
      std::cout << "probe trained, final epoch loss " << detail::fmt_double(losses.back()) << '\n';
      return 0;
    }

    if (c_infer->parsed()) {
      RunConfig rc = effective(c_infer);
      Engine engine = load_engine(o.ckpt);
      Image img = load_image_any(o.image_path);
      double alpha = 1.0;
      if (rc.vrc_enabled) {
        if (c_infer->count("--vrc-alpha")) {
          alpha = o.vrc_alpha;
        } else if (!o.vrc_ckpt.empty()) {
          alpha = load_vrc(o.vrc_ckpt).predict_alpha(img);
        } else {
          throw ParameterError("--vrc on needs --vrc-ckpt or --vrc-alpha");
        }
        if (alpha <= 0.0 || alpha > 1.0)
          throw ParameterError("compression ratio must be in (0,1], got " + detail::fmt_double(alpha));
        img = resize_area_ratio(img, alpha);
        std::cout << "vrc_alpha=" << detail::fmt_double(alpha) << '\n';
      }
      std::string answer = engine.infer_answer(img, o.prompt, parse_branch(rc.branch), o.max_new);
      std::cout << "answer=" << answer << '\n';
      RunManifest m = base_manifest(rc, false);
      m.config["prompt"] = o.prompt;
      m.config["max_new"] = std::to_string(o.max_new);
      if (rc.vrc_enabled) m.config["vrc.alpha"] = detail::fmt_double(alpha);
      if (!o.out.empty()) {
        std::ofstream os(o.out);
        if (!os) throw EngineError("cannot open " + o.out + " for writing");
        os << answer << '\n';
        if (!os) throw EngineError("failed writing " + o.out);
        m.outputs[o.out] = digest_file(o.out);
      }
      save_manifest(o.manifest_path.empty() ? detail::default_manifest(o.out, "infer") : o.manifest_path,
                    m);
      return 0;
    }

    if (c_quant->parsed()) {
      RunConfig rc = effective(c_quant);
      Engine engine = load_engine(o.ckpt);
      save_engine(o.out, engine, rc.quant_group);
      RunManifest m = base_manifest(rc, false);
      m.outputs[o.out] = digest_file(o.out);
      save_manifest(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
      std::cout << "wrote " << o.out << '\n';
      return 0;
    }

    if (c_bench->parsed()) {
      RunConfig rc = effective(c_bench);
      Engine engine(engine_cfg(rc));
      bool serial_mode = false, global_mode = false;
      for (const std::string& mode : detail::split_list(o.modes)) {
        if (mode == "serial")
          serial_mode = true;
        else if (mode == "global")
          global_mode = true;
        else
          throw ParameterError("unknown bench mode '" + mode + "' (expected serial or global)");
      }
      BenchReport rep = run_bench(engine, detail::split_list(o.resolutions), serial_mode, global_mode,
                                  parse_branch(rc.branch), o.timing, o.global_cap);
      std::ofstream os(o.out);
      if (!os) throw EngineError("cannot open " + o.out + " for writing");
      os << rep.to_csv();
      if (!os) throw EngineError("failed writing " + o.out);
      RunManifest m = base_manifest(rc, true);
      m.config["resolutions"] = o.resolutions;
      m.config["modes"] = o.modes;
      m.config["timing"] = o.timing ? "true" : "false";
      m.config["global_cap"] = std::to_string(o.global_cap);
      m.outputs[o.out] = digest_file(o.out);
      save_manifest(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
      std::cout << "wrote " << o.out << '\n';
      return 0;
    }

    if (c_score->parsed()) {
      RunConfig rc = effective(c_score);
      ScoreOutcome outcome =
          score_metric(o.metric, load_score_csv(o.pred_path), load_score_csv(o.truth_path));
      for (const std::string& w : outcome.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << o.metric << "=" << detail::fmt_double(outcome.value) << '\n';
      RunManifest m = base_manifest(rc, false);
      m.config["metric"] = o.metric;
      if (!o.out.empty()) {
        std::ofstream os(o.out);
        if (!os) throw EngineError("cannot open " + o.out + " for writing");
        os << detail::fmt_double(outcome.value) << '\n';
        if (!os) throw EngineError("failed writing " + o.out);
        m.outputs[o.out] = digest_file(o.out);
      }
      save_manifest(o.manifest_path.empty() ? detail::default_manifest(o.out, "score") : o.manifest_path,
                    m);
      return 0;
    }
  } catch (const EngineError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cerr << "usage error: no subcommand\n";
  return 2;
}

// Re-run the command a manifest records. The caller compares digests.
inline int replay_manifest_file(const std::string& path) {
  RunManifest m = load_manifest(path);
  if (m.engine_version != kEngineVersion)
    throw EngineError(path + ": written by engine " + m.engine_version + ", this is " + kEngineVersion);
  return dispatch(m.command);
}

}  // namespace tvlm
