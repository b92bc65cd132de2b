#pragma once

// Command-line front end. run() is the whole program; tools/birqa.cpp only
// forwards argv so tests can drive every subcommand in-process.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "birqa.hpp"

namespace birqa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Usage errors detected after parsing (mutually required flags etc.).
class UsageError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::uint64_t env_seed() {
  if (const char* s = std::getenv("BIRQA_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError(std::string("BIRQA_SEED is not an unsigned integer: '") + s + "'");
    }
  }
  return 0;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError(p.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError(p.string() + ": cannot open for writing");
  return out;
}

inline std::vector<double> parse_eps_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    try {
      out.push_back(std::stod(part) / 255.0);
    } catch (const std::exception&) {
      throw UsageError("--eps-list: cannot parse '" + part + "'");
    }
  }
  return out;
}

/// Two-column prediction CSV: index,score.
inline std::vector<double> read_predictions(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError(p.string() + ": cannot open predictions");
  std::string line;
  std::getline(in, line);
  if (line.rfind("index,score", 0) != 0) throw Error(p.string() + ": expected header 'index,score'");
  std::vector<double> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      out.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw Error(p.string() + " row " + std::to_string(row) + ": cannot parse score");
    }
  }
  return out;
}

inline void write_predictions(const fs::path& p, const std::vector<double>& v) {
  auto out = open_out(p);
  out.precision(17);
  out << "index,score\n";
  for (std::size_t i = 0; i < v.size(); ++i) out << i << ',' << v[i] << "\n";
}

inline void write_gnuplot(const fs::path& script, const fs::path& csv, const std::string& title,
                          const std::string& xlabel, const std::vector<std::pair<int, std::string>>& cols) {
  auto out = open_out(script);
  out << "set datafile separator ','\n"
      << "set key autotitle columnhead\n"
      << "set title '" << title << "'\n"
      << "set xlabel '" << xlabel << "'\n"
      << "set terminal pngcairo size 800,500\n"
      << "set output '" << fs::path(script).replace_extension(".png").filename().string() << "'\n"
      << "plot ";
  for (std::size_t i = 0; i < cols.size(); ++i) {
    out << (i ? ", " : "") << "'" << csv.filename().string() << "' using 1:" << cols[i].first
        << " with lines title '" << cols[i].second << "'";
  }
  out << "\n";
}

}  // namespace detail

struct NetOptions {
  std::string config_file;
  int channels = 0;
  int head_width = 0;
  std::string features;
  bool no_csram = false, no_scgb = false, no_rah = false;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "network config file (key=value lines)");
    app->add_option("--channels", channels, "feature width C");
    app->add_option("--head-width", head_width, "head embedding width d");
    app->add_option("--features", features, "4-bit feature subset, order SSIM INFO COLORDIFF LBP");
    app->add_flag("--no-csram", no_csram, "disable bottom-up residual attention");
    app->add_flag("--no-scgb", no_scgb, "disable top-down cross gating");
    app->add_flag("--no-rah", no_rah, "use the pooled baseline head");
  }

  NetworkConfig build(std::uint64_t seed) const {
    NetworkConfig cfg;
    if (!config_file.empty()) cfg = parse_config(detail::read_file(config_file));
    else cfg.seed = seed;
    if (channels) cfg.channels = channels;
    if (head_width) cfg.head_width = head_width;
    if (!features.empty()) apply_config_line(cfg, "features", features);
    if (no_csram) cfg.enable_csram = false;
    if (no_scgb) cfg.enable_scgb = false;
    if (no_rah) cfg.enable_rah = false;
    cfg.validate();
    return cfg;
  }
};

struct AttackOptions {
  std::string kind = "pgd";
  double eps = 8.0;
  int steps = 10;
  double step_size = 2.0;
  bool minimize = false;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "attack kind")->check(CLI::IsMember({"pgd", "fgsm"}));
    app->add_option("--eps", eps, "l-inf budget in 8-bit counts (x/255)");
    app->add_option("--steps", steps, "PGD iterations");
    app->add_option("--step-size", step_size, "PGD step in 8-bit counts (x/255)");
    app->add_flag("--minimize", minimize, "push the score down instead of up");
  }

  AttackConfig build() const {
    AttackConfig c;
    c.kind = kind == "fgsm" ? AttackKind::kFgsm : AttackKind::kPgd;
    c.eps = eps / 255.0;
    c.steps = steps;
    c.step_size = std::min(step_size, eps) / 255.0;
    c.goal = minimize ? AttackGoal::kMinimize : AttackGoal::kMaximize;
    try {
      c.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"birqa: full-reference image quality with anchored adversarial training"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  int threads = 1;
  bool print_params = false;
  auto* seed_opt = app.add_option("--seed", seed, "seed for every random choice (fallback: BIRQA_SEED)");
  app.add_option("--threads", threads, "worker count; all work runs on one thread")
      ->check(CLI::PositiveNumber);
  app.add_flag("--print-params", print_params, "print the parameter table of the model in use");
  app.fallthrough();

  // score
  auto* score = app.add_subcommand("score", "score a (reference, distorted) pair");
  std::string ref_path, dist_path, model_path, dump_dir;
  score->add_option("REF", ref_path)->required();
  score->add_option("DIST", dist_path)->required();
  score->add_option("--model", model_path, "checkpoint")->required();
  score->add_option("--dump-features", dump_dir, "write feature maps as PPM into this directory");

  // train / at / aat share data options
  std::string manifest, val_manifest, out_path, history_path, certs_path;
  int epochs = 20, batch = 32, iterations = 200;
  double lr = 1e-4, band = 0.0, eps_budget = kDefaultEpsBudget;
  bool gnuplot = false;
  NetOptions net;
  AttackOptions atk;

  auto* train = app.add_subcommand("train", "clean training");
  train->add_option("--manifest", manifest, "training manifest")->required();
  train->add_option("--val", val_manifest, "validation manifest for per-epoch SROCC");
  train->add_option("--out", out_path, "output checkpoint")->required();
  train->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  train->add_option("--batch-size", batch)->check(CLI::Range(2, 1 << 20));
  train->add_option("--lr", lr)->check(CLI::PositiveNumber);
  train->add_option("--history", history_path, "epoch,loss,srocc CSV");
  train->add_flag("--gnuplot", gnuplot, "also write a gnuplot script next to the history");
  net.add(train);

  auto* at = app.add_subcommand("at", "vanilla adversarial training (every sample attacked)");
  at->add_option("--manifest", manifest)->required();
  at->add_option("--val", val_manifest);
  at->add_option("--model", model_path, "initial checkpoint")->required();
  at->add_option("--out", out_path)->required();
  at->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  at->add_option("--batch-size", batch)->check(CLI::Range(2, 1 << 20));
  at->add_option("--lr", lr)->check(CLI::PositiveNumber);
  at->add_option("--history", history_path);
  at->add_flag("--gnuplot", gnuplot);
  atk.add(at);

  auto* aat = app.add_subcommand("aat", "anchored adversarial fine-tuning");
  aat->add_option("--manifest", manifest)->required();
  aat->add_option("--model", model_path, "initial (clean) checkpoint")->required();
  aat->add_option("--out", out_path)->required();
  aat->add_option("--iterations", iterations)->check(CLI::PositiveNumber);
  aat->add_option("--lr", lr)->check(CLI::PositiveNumber);
  aat->add_option("--band", band, "MOS band width R (default: MOS range / 20)");
  aat->add_option("--eps-budget", eps_budget, "anchor error budget for diagnostics");
  aat->add_option("--history", history_path, "step,loss,anchored CSV");
  aat->add_option("--certs", certs_path, "per-batch certificate CSV");
  aat->add_flag("--gnuplot", gnuplot);
  atk.add(aat);

  // attack
  auto* attack = app.add_subcommand("attack", "write adversarial distorted images");
  std::string out_dir;
  attack->add_option("--manifest", manifest)->required();
  attack->add_option("--model", model_path)->required();
  attack->add_option("--out-dir", out_dir)->required();
  atk.add(attack);

  // eval
  auto* eval = app.add_subcommand("eval", "correlation report, optional attacks and bootstrap");
  std::string pred_path, pred_b_path, save_pred, eps_list;
  int resamples = 1000;
  eval->add_option("--manifest", manifest, "labels (and images when --model is given)")->required();
  eval->add_option("--model", model_path, "score the manifest with this checkpoint");
  eval->add_option("--pred", pred_path, "prediction CSV (index,score) instead of --model");
  eval->add_option("--compare", pred_b_path, "second prediction CSV for the paired bootstrap");
  eval->add_option("--resamples", resamples)->check(CLI::PositiveNumber);
  eval->add_option("--eps-list", eps_list, "PGD budgets in 8-bit counts, e.g. 2,4,8,10");
  eval->add_option("--save-pred", save_pred, "write the model predictions");
  eval->add_option("--out", out_path, "report CSV");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "synthetic distortion set with pseudo-MOS");
  std::string refs_dir;
  int num_refs = 40, size = 32, severities = 5;
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--refs", refs_dir, "reference images (default: procedural)");
  gen->add_option("--num-refs", num_refs)->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "procedural reference side")->check(CLI::Range(16, 4096));
  gen->add_option("--severities", severities)->check(CLI::PositiveNumber);

  // bench
  auto* bench = app.add_subcommand("bench", "feature and forward timings per resolution");
  std::string sizes = "512x384,1920x1080";
  int reps = 3;
  bench->add_option("--model", model_path, "checkpoint (default: fresh default model)");
  bench->add_option("--sizes", sizes, "comma list of WxH");
  bench->add_option("--reps", reps)->check(CLI::PositiveNumber);
  bench->add_option("--out", out_path, "timing CSV");
  net.add(bench);

  // bound-report
  auto* bound = app.add_subcommand("bound-report", "aggregate certificates into bound vs empirical");
  bound->add_option("--certs", certs_path)->required();
  bound->add_option("--out", out_path, "step,bound,E,holds CSV");
  bound->add_flag("--gnuplot", gnuplot);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "feature-subset sweep");
  std::string subsets = "all";
  sweep->add_option("--manifest", manifest)->required();
  sweep->add_option("--val", val_manifest)->required();
  sweep->add_option("--subsets", subsets, "'all' or comma list of 4-bit masks");
  sweep->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  sweep->add_option("--lr", lr)->check(CLI::PositiveNumber);
  sweep->add_option("--out", out_path)->required();
  net.add(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!*seed_opt) seed = detail::env_seed();

    auto show_params = [&](const Model& m) {
      if (print_params) m.print_parameters(out);
    };
    auto write_history = [&](const TrainHistory& h) {
      if (history_path.empty()) return;
      auto f = detail::open_out(history_path);
      f.precision(10);
      f << "epoch,loss,srocc\n";
      for (const auto& e : h.epochs) f << e.epoch << ',' << e.loss << ',' << e.srocc << "\n";
      if (gnuplot) {
        detail::write_gnuplot(fs::path(history_path).replace_extension(".gp"), history_path,
                              "training history", "epoch", {{2, "loss"}, {3, "srocc"}});
      }
    };
    auto load_val = [&]() {
      return val_manifest.empty() ? std::vector<Sample>{} : load_samples(load_manifest(val_manifest));
    };

    if (*score) {
      const Model m = load_model(model_path);
      show_params(m);
      const RgbImage r = load_image(ref_path), d = load_image(dist_path);
      const FeaturePyramid pyr = build_pyramid(r, d, m.config().features);
      if (!dump_dir.empty()) dump_features(pyr, dump_dir);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.9g\n", static_cast<double>(m.score(pyr)));
      out << buf;
      return kExitOk;
    }

    if (*train) {
      Model m(net.build(seed));
      show_params(m);
      const auto tr = load_samples(load_manifest(manifest));
      TrainOptions opt{epochs, batch, lr, seed};
      const auto h = train_clean(m, tr, opt, load_val());
      write_history(h);
      save_checkpoint(m, out_path, &h.adam, h.adam.step);
      out << "trained " << h.epochs.size() << " epochs, final loss " << h.epochs.back().loss
          << ", srocc " << h.epochs.back().srocc << "\n";
      return kExitOk;
    }

    if (*at) {
      Model m = load_model(model_path);
      show_params(m);
      const auto tr = load_samples(load_manifest(manifest));
      TrainOptions opt{epochs, batch, lr, seed};
      const auto h = at_vanilla(m, tr, atk.build(), opt, load_val());
      write_history(h);
      save_checkpoint(m, out_path, &h.adam, h.adam.step);
      out << "adversarially trained " << h.epochs.size() << " epochs, final loss "
          << h.epochs.back().loss << "\n";
      return kExitOk;
    }

    if (*aat) {
      Model m = load_model(model_path);
      show_params(m);
      const auto tr = load_samples(load_manifest(manifest));
      AatOptions opt;
      opt.iterations = iterations;
      opt.lr = lr;
      opt.seed = seed;
      opt.eps_budget = eps_budget;
      if (band > 0.0) opt.batch.band = band;
      const auto r = aat_finetune(m, tr, atk.build(), opt);
      if (!history_path.empty()) {
        auto f = detail::open_out(history_path);
        f.precision(10);
        f << "step,loss,anchored\n";
        for (const auto& h : r.history) f << h.step << ',' << h.loss << ',' << h.anchored << "\n";
        if (gnuplot) {
          detail::write_gnuplot(fs::path(history_path).replace_extension(".gp"), history_path,
                                "anchored training", "iteration", {{2, "loss"}, {3, "anchored"}});
        }
      }
      int holds = 0, flagged = 0;
      if (!certs_path.empty()) {
        auto f = detail::open_out(certs_path);
        f << kCertificateCsvHeader << "\n";
        for (const auto& c : r.certificates) f << certificate_csv_row(c) << "\n";
      }
      for (const auto& c : r.certificates) {
        holds += c.holds;
        flagged += !c.violating_anchors.empty();
      }
      save_checkpoint(m, out_path, &r.adam, r.adam.step);
      out << "aat " << r.history.size() << " iterations, certificates hold " << holds << "/"
          << r.certificates.size() << ", batches with anchors over budget " << flagged << "\n";
      return kExitOk;
    }

    if (*attack) {
      const AttackConfig cfg = atk.build();
      const Model m = load_model(model_path);
      show_params(m);
      const Manifest mf = load_manifest(manifest);
      fs::create_directories(out_dir);
      auto csv = detail::open_out(fs::path(out_dir) / "attack.csv");
      csv.precision(10);
      csv << "pair_id,score_before,score_after,linf\n";
      Manifest adv_manifest;
      adv_manifest.base_dir = out_dir;
      for (std::size_t i = 0; i < mf.size(); ++i) {
        const RgbImage r8 = load_image(mf.resolve(mf.rows[i].ref_path));
        const RgbImage d8 = load_image(mf.resolve(mf.rows[i].dist_path));
        const PlanarImage r = to_float(r8), d = to_float(d8);
        Rng rng = make_rng(seed, 0xe7a1 + i);
        const RgbImage adv = quantize(attack_float(m, r, d, cfg, rng), d8.width, d8.height);
        int linf = 0;
        for (std::size_t k = 0; k < adv.data.size(); ++k) {
          linf = std::max(linf, std::abs(int(adv.data[k]) - int(d8.data[k])));
        }
        char name[32];
        std::snprintf(name, sizeof name, "adv_%05zu.ppm", i);
        save_image(adv, fs::path(out_dir) / name);
        const FeatureMask mask = m.config().features;
        csv << i << ',' << m.score(build_pyramid(r8, d8, mask)) << ','
            << m.score(build_pyramid(r8, adv, mask)) << ',' << linf / 255.0 << "\n";
        adv_manifest.rows.push_back({fs::absolute(mf.resolve(mf.rows[i].ref_path)).string(), name,
                                     mf.rows[i].mos});
      }
      save_manifest(adv_manifest, fs::path(out_dir) / "manifest.csv");
      out << "attacked " << mf.size() << " pairs into " << out_dir << "\n";
      return kExitOk;
    }

    if (*eval) {
      const Manifest mf = load_manifest(manifest);
      std::vector<double> y;
      for (const auto& r : mf.rows) y.push_back(r.mos);
      std::vector<double> pred;
      EvalReport rep;
      if (!model_path.empty() == !pred_path.empty()) {
        throw UsageError("eval: give exactly one of --model or --pred");
      }
      if (!model_path.empty()) {
        const Model m = load_model(model_path);
        show_params(m);
        const auto data = load_samples(mf);
        pred = predict(m, data);
        rep = evaluate(y, pred);
        for (double e : detail::parse_eps_list(eps_list)) {
          AttackConfig c;
          c.eps = e;
          c.step_size = std::min(c.step_size, e);
          const auto adv = predict_attacked(m, data, c, seed);
          rep.attacked.push_back({e, srocc(y, adv), plcc_stat(y, adv)});
        }
      } else {
        if (!eps_list.empty()) throw UsageError("eval: --eps-list needs --model");
        pred = detail::read_predictions(pred_path);
        if (pred.size() != y.size()) throw Error("eval: prediction count does not match manifest");
        rep = evaluate(y, pred);
      }
      if (!save_pred.empty()) detail::write_predictions(save_pred, pred);
      print_report(out, rep);
      if (!out_path.empty()) {
        auto f = detail::open_out(out_path);
        write_report_csv(f, rep);
      }
      if (!pred_b_path.empty()) {
        const auto b = detail::read_predictions(pred_b_path);
        if (b.size() != y.size()) throw Error("eval: --compare count does not match manifest");
        const auto bs = bootstrap_delta(y, pred, b, resamples, seed);
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "bootstrap dSROCC median %.6f  95%% CI [%.6f, %.6f]  significant %s  "
                      "(redraws %d)\n",
                      bs.median, bs.lo, bs.hi, bs.significant ? "yes" : "no", bs.redraws);
        out << buf;
      }
      return kExitOk;
    }

    if (*gen) {
      fs::path src = refs_dir;
      if (refs_dir.empty()) {
        src = fs::path(out_dir) / "src";
        gen_references(src, num_refs, size, size, seed);
      }
      const Manifest m = gen_synthetic(src, out_dir, {severities, seed});
      const Split sp = split_by_reference(m, seed);
      save_manifest(sp.train, fs::path(out_dir) / "train.csv");
      save_manifest(sp.val, fs::path(out_dir) / "val.csv");
      save_manifest(sp.test, fs::path(out_dir) / "test.csv");
      out << "generated " << m.size() << " pairs (train " << sp.train.size() << ", val "
          << sp.val.size() << ", test " << sp.test.size() << "), MOS range [" << m.mos_min << ", "
          << m.mos_max << "]\n";
      return kExitOk;
    }

    if (*bench) {
      const Model m = model_path.empty() ? Model(net.build(seed)) : load_model(model_path);
      show_params(m);
      std::vector<std::pair<int, int>> dims;
      std::stringstream ss(sizes);
      for (std::string part; std::getline(ss, part, ',');) {
        int w = 0, h = 0;
        if (std::sscanf(part.c_str(), "%dx%d", &w, &h) != 2 || w < kMinImageSide || h < kMinImageSide) {
          throw UsageError("bench: bad size '" + part + "'");
        }
        dims.emplace_back(w, h);
      }
      std::ostringstream csv;
      csv.precision(10);
      csv << "width,height,pixels,feature_ms,forward_ms,total_ms,ns_per_pixel\n";
      using clock = std::chrono::steady_clock;
      for (const auto& [w, h] : dims) {
        const PlanarImage r = to_float(procedural_reference(w, h, seed));
        Rng rng = make_rng(seed, 0xbe);
        PlanarImage d = r;
        for (auto& v : d.data) v = std::clamp(v + static_cast<float>(uniform(rng, -0.05, 0.05)), 0.0f, 1.0f);
        std::vector<double> tf, tm;
        for (int k = 0; k < reps; ++k) {
          const auto t0 = clock::now();
          const FeaturePyramid pyr = build_pyramid(r, d, m.config().features);
          const auto t1 = clock::now();
          volatile float s = m.score(pyr);
          (void)s;
          const auto t2 = clock::now();
          tf.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
          tm.push_back(std::chrono::duration<double, std::milli>(t2 - t1).count());
        }
        std::sort(tf.begin(), tf.end());
        std::sort(tm.begin(), tm.end());
        const double f = tf[tf.size() / 2], fw = tm[tm.size() / 2];
        const double px = static_cast<double>(w) * h;
        csv << w << ',' << h << ',' << static_cast<long long>(px) << ',' << f << ',' << fw << ','
            << f + fw << ',' << (f + fw) * 1e6 / px << "\n";
      }
      out << csv.str();
      if (!out_path.empty()) detail::open_out(out_path) << csv.str();
      return kExitOk;
    }

    if (*bound) {
      std::ifstream in(certs_path);
      if (!in) throw IoError(certs_path + ": cannot open certificates");
      std::string line;
      std::getline(in, line);
      if (line != kCertificateCsvHeader) {
        throw Error(certs_path + ": expected header '" + std::string(kCertificateCsvHeader) + "'");
      }
      std::ostringstream csv;
      csv.precision(17);
      csv << "step,bound,E,holds\n";
      int rows = 0, violations = 0;
      double worst_slack = 1e300;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> f;
        std::stringstream ls(line);
        for (std::string part; std::getline(ls, part, ',');) f.push_back(std::stod(part));
        if (f.size() != 8) throw Error(certs_path + ": malformed row '" + line + "'");
        const bool holds = f[6] <= f[5];
        csv << static_cast<long>(f[0]) << ',' << f[5] << ',' << f[6] << ',' << (holds ? 1 : 0) << "\n";
        ++rows;
        violations += !holds;
        worst_slack = std::min(worst_slack, f[5] - f[6]);
      }
      if (!out_path.empty()) {
        detail::open_out(out_path) << csv.str();
        if (gnuplot) {
          detail::write_gnuplot(fs::path(out_path).replace_extension(".gp"), out_path,
                                "certified bound vs observed error", "step", {{2, "bound"}, {3, "E"}});
        }
      } else {
        out << csv.str();
      }
      out << "rows " << rows << ", violations " << violations << ", min slack " << worst_slack << "\n";
      return kExitOk;
    }

    if (*sweep) {
      std::vector<FeatureMask> masks;
      if (subsets == "all") {
        masks = all_subsets();
      } else {
        std::stringstream ss(subsets);
        for (std::string part; std::getline(ss, part, ',');) {
          NetworkConfig tmp;
          apply_config_line(tmp, "features", part);
          if (tmp.features.none()) throw UsageError("sweep: empty subset '" + part + "'");
          masks.push_back(tmp.features);
        }
      }
      const auto tr = load_samples(load_manifest(manifest));
      const auto va = load_samples(load_manifest(val_manifest));
      TrainOptions opt{epochs, batch, lr, seed};
      const auto rows = feature_sweep(tr, va, masks, net.build(seed), opt);
      auto f = detail::open_out(out_path);
      write_sweep_csv(f, rows);
      write_sweep_csv(out, rows);
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace birqa::cli
