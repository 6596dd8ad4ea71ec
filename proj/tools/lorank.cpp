// lorank: command-line front end for instance generation, training, landscape
// analysis, boundary sweeps and the threshold calculators.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lorank/experiments.hpp"
#include "lorank/io.hpp"
#include "lorank/landscape.hpp"
#include "lorank/stats.hpp"
#include "lorank/theory.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace lorank;

namespace {

struct Globals {
  std::string out;
  int workers = 1;
  std::string format = "text";
  std::string generator{kGeneratorId};
  Caps caps;

  bool as_json() const { return format == "json"; }
};

struct InstanceFlags {
  int m = 8, n = 8, K = 2, N = 16;
  std::uint64_t seed = 0;
  std::string loss = "mse";
  int target_rank = 1;
  double noise_std = 0.01;
};

struct TrainFlags {
  TrainConfig cfg;
  std::string step_rule = "backtracking";
  std::vector<std::string> schedule = {"1e-2:1e-6", "1e-3:1e-7", "1e-4:1e-8"};

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.step_rule = parse_step_rule(step_rule);
    c.lambda_schedule.clear();
    for (const std::string& s : schedule) {
      const auto colon = s.find(':');
      require(colon != std::string::npos, ErrorClass::Config,
              "lambda_schedule entries are lambda:grad_tol, got '" + s + "'");
      c.lambda_schedule.push_back({parse_double(s.substr(0, colon), "lambda"),
                                   parse_double(s.substr(colon + 1), "grad_tol")});
    }
    validate(c);
    return c;
  }
};

void add_instance_options(CLI::App* app, InstanceFlags& f) {
  app->add_option("--m", f.m, "Rows of the adapted matrix")->capture_default_str();
  app->add_option("--n", f.n, "Columns of the adapted matrix")->capture_default_str();
  app->add_option("--K", f.K, "Outputs per sample")->capture_default_str();
  app->add_option("--N", f.N, "Samples")->capture_default_str();
  app->add_option("--seed", f.seed, "Instance seed")->capture_default_str();
  app->add_option("--loss", f.loss, "mse or ce")->capture_default_str();
  app->add_option("--target_rank", f.target_rank, "Rank of the planted target")->capture_default_str();
  app->add_option("--noise_std", f.noise_std, "Label noise (MSE only)")->capture_default_str();
}

void add_train_options(CLI::App* app, TrainFlags& f, bool with_rank_and_seeds) {
  TrainConfig& c = f.cfg;
  if (with_rank_and_seeds) {
    app->add_option("--rank", c.rank, "Adapter rank r")->capture_default_str();
    app->add_option("--seeds", c.seeds, "Initialization seeds, one run each")->capture_default_str();
  }
  app->add_option("--init_scale", c.init_scale,
                  "Init std; negative means 1e-2/sqrt(max(m,n))")->capture_default_str();
  app->add_option("--step_rule", f.step_rule, "backtracking or fixed")->capture_default_str();
  app->add_option("--base_step", c.base_step, "Initial / fixed step size")->capture_default_str();
  app->add_option("--max_step", c.max_step, "Largest backtracking trial step")->capture_default_str();
  app->add_option("--armijo", c.armijo, "Sufficient-decrease constant")->capture_default_str();
  app->add_option("--max_iters", c.max_iters, "Iteration cap per stage")->capture_default_str();
  app->add_option("--lambda_schedule", f.schedule, "Stages as lambda:grad_tol, decreasing lambda")
      ->capture_default_str();
  app->add_option("--record_interval", c.record_interval, "Trace every k iterations")
      ->capture_default_str();
  app->add_option("--newton_refine", c.newton_refine, "Damped Newton steps near a minimum")
      ->capture_default_str();
  app->add_option("--newton_switch", c.newton_switch, "Gradient norm that enables Newton steps")
      ->capture_default_str();
  app->add_option("--newton_cooldown", c.newton_cooldown, "Descent steps after a rejected Newton step")
      ->capture_default_str();
  app->add_option("--polish_steps", c.polish_steps, "Newton steps after the last stage")
      ->capture_default_str();
  app->add_option("--divergence_factor", c.divergence_factor, "Loss growth treated as divergence")
      ->capture_default_str();
}

void add_tolerance_options(CLI::App* app, Tolerances& t) {
  app->add_option("--grad_rel", t.grad_rel, "grad_tol = grad_rel * (1 + |loss|)")->capture_default_str();
  app->add_option("--eig_rel", t.eig_rel, "eig_tol = eig_rel * |H|_op")->capture_default_str();
  app->add_option("--rank_rel", t.rank_rel, "Relative singular value cutoff")->capture_default_str();
  app->add_option("--gap_abs", t.gap_abs, "Absolute loss gap for spuriousness")->capture_default_str();
  app->add_option("--gap_rel", t.gap_rel, "Relative loss gap for spuriousness")->capture_default_str();
}

std::string fmt(double x, int digits = 6) {
  if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  std::ostringstream out;
  out << std::setprecision(digits) << x;
  return out.str();
}

std::string fixed(double x, int decimals) {
  if (!std::isfinite(x)) return fmt(x);
  std::ostringstream out;
  out << std::fixed << std::setprecision(decimals) << x;
  return out.str();
}

json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

template <typename T>
json opt_num(const std::optional<T>& x) {
  return x ? json(*x) : json(nullptr);
}

fs::path require_out(const Globals& g, const std::string& command) {
  require(!g.out.empty(), ErrorClass::Config, command + " needs --out");
  return fs::path(g.out);
}

// Global options plus the active command's section; loadable with --config.
void write_snapshot(const CLI::App& app, const fs::path& dir) {
  const std::string active = app.get_subcommands().front()->get_name() + ".";
  std::ostringstream text;
  text << "# effective configuration\n";
  std::istringstream all(app.config_to_str(true, false));
  for (std::string line; std::getline(all, line);) {
    const std::string key = line.substr(0, line.find('='));
    if (key == "json") continue;
    if (key.find('.') == std::string::npos || key.rfind(active, 0) == 0) text << line << "\n";
  }
  write_file_atomic(dir / "effective_config.ini", text.str());
}

ProblemInstance<double> make_instance(const InstanceFlags& f, const Caps& caps) {
  const LossKind kind = parse_loss_kind(f.loss);
  auto op = std::make_shared<const FeatureOperator<double>>(
      gen_operator<double>(f.m, f.n, f.K, f.N, f.seed, caps));
  return gen_instance<double>(op, f.target_rank, kind == LossKind::MSE ? f.noise_std : 0.0, kind,
                              derive_seed(f.seed, {1}));
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

// --- commands ---------------------------------------------------------------

void run_gen(const CLI::App& app, const Globals& g, const InstanceFlags& f) {
  const fs::path out = require_out(g, "gen");
  const auto inst = make_instance(f, g.caps);
  save_instance(inst, out);
  write_snapshot(app, out);
  if (g.as_json()) {
    print_json({{"path", out.string()}, {"m", f.m}, {"n", f.n}, {"K", f.K}, {"N", f.N},
                {"loss", std::string(to_string(inst.loss_kind))}, {"seed", f.seed}});
  } else {
    std::cout << "wrote " << out.string() << "  m=" << f.m << " n=" << f.n << " K=" << f.K
              << " N=" << f.N << " loss=" << to_string(inst.loss_kind) << "\n";
  }
}

void run_train(const CLI::App& app, const Globals& g, const std::string& instance_path,
               const InstanceFlags& f, const TrainFlags& tf) {
  const fs::path out = require_out(g, "train");
  const TrainConfig cfg = tf.resolve();
  fs::path inst_dir;
  ProblemInstance<double> inst;
  if (!instance_path.empty()) {
    inst_dir = instance_path;
    inst = load_instance(inst_dir);
  } else {
    inst_dir = out / "instance";
    inst = make_instance(f, g.caps);
    save_instance(inst, inst_dir);
  }
  const auto runs = multi_seed(inst, cfg, inst.loss_kind, g.workers, g.caps);
  write_snapshot(app, out);

  json listing = json::array();
  if (!g.as_json())
    std::cout << "seed_index\tseed\tconverged\titerations\tnewton_steps\tdata_loss\tgrad_norm\tfile\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const fs::path file = out / ("run_" + std::to_string(i) + ".json");
    save_run_record({fs::absolute(inst_dir).string(), inst.loss_kind, cfg, runs[i]}, file);
    const auto& r = runs[i];
    if (g.as_json()) {
      listing.push_back({{"seed_index", i}, {"seed", r.seed}, {"converged", r.converged},
                         {"iterations", r.iterations}, {"data_loss", num(double(r.loss.data_loss))},
                         {"grad_norm", num(r.grad_norm)}, {"diagnostic", r.diagnostic},
                         {"file", file.string()}});
    } else {
      std::cout << i << "\t" << r.seed << "\t" << (r.converged ? "yes" : "no") << "\t"
                << r.iterations << "\t" << r.newton_steps << "\t" << fmt(double(r.loss.data_loss), 10)
                << "\t" << fmt(r.grad_norm, 3) << "\t" << file.string() << "\n";
      if (!r.diagnostic.empty()) std::cout << "  diagnostic: " << r.diagnostic << "\n";
    }
  }
  if (g.as_json()) print_json({{"runs", listing}});
}

void run_analyze(const Globals& g, const std::string& record_path, const std::string& instance_override,
                 std::optional<double> floor_flag, const Tolerances& tol) {
  const RunRecord rec = load_run_record(record_path);
  const ProblemInstance<double> inst =
      load_instance(instance_override.empty() ? rec.instance_path : instance_override);
  const auto& point = rec.result.point;
  require(point.u.size() > 0, ErrorClass::Undefined, "run record holds no point");

  double floor = 0.0;
  std::string floor_source;
  if (floor_flag) {
    floor = *floor_flag;
    floor_source = "flag";
  } else {
    floor = double(loss(inst, point, rec.kind).data_loss);
    floor_source = "point";
    if (rec.kind == LossKind::MSE) {
      const double ls = least_squares_floor(inst);
      if (ls < floor) {
        floor = ls;
        floor_source = "least-squares";
      }
    }
  }
  const bool run_ok = rec.result.diagnostic.empty();
  const auto rep = analyze_point(inst, point, rec.kind, floor, run_ok, tol, g.caps);

  if (g.as_json()) {
    json j = {{"classification", std::string(to_string(rep.classification))},
              {"rank", point.rank()},
              {"effective_rank", rep.effective_rank},
              {"lambda", point.lambda},
              {"loss", {{"data", num(double(rep.loss.data_loss))},
                        {"reg", num(double(rep.loss.reg_loss))},
                        {"total", num(double(rep.loss.total))}}},
              {"grad_norm", num(rep.grad_norm)},
              {"balance_residual", num(rep.balance_residual)},
              {"hessian", {{"min_eig", num(rep.hessian.smallest)},
                           {"max_eig", num(rep.hessian.largest)},
                           {"dense", rep.hessian.dense}}},
              {"global_floor", num(rep.global_floor)},
              {"floor_source", floor_source},
              {"thresholds", {{"grad_tol", rep.thresholds.grad_tol},
                              {"eig_tol", rep.thresholds.eig_tol},
                              {"gap_tol", rep.thresholds.gap_tol}}}};
    if (rep.blocks) {
      j["blocks"] = {{"r11_deviation", num(double(rep.blocks->r11_deviation))},
                     {"r12_norm", num(double(rep.blocks->r12_norm))},
                     {"r21_norm", num(double(rep.blocks->r21_norm))},
                     {"sigma1_r22", num(double(rep.blocks->sigma1_r22))},
                     {"residual_norm", num(double(rep.blocks->residual_norm))}};
      j["q_min"] = rep.q_eigs.empty() ? json(nullptr) : json(rep.q_eigs.front());
    }
    if (rep.certificate) {
      const auto& c = *rep.certificate;
      j["certificate"] = {{"op_norm_r", c.op_norm_r}, {"op_norm_ok", c.op_norm_ok},
                          {"certified_global", c.certified_global}, {"advisory", c.advisory}};
    }
    print_json(j);
    return;
  }
  std::cout << "classification    " << to_string(rep.classification) << "\n"
            << "rank              " << point.rank() << " (effective " << rep.effective_rank << ")\n"
            << "lambda            " << fmt(point.lambda) << "\n"
            << "loss              data=" << fmt(double(rep.loss.data_loss), 10)
            << " reg=" << fmt(double(rep.loss.reg_loss), 10)
            << " total=" << fmt(double(rep.loss.total), 10) << "\n"
            << "global floor      " << fmt(rep.global_floor, 10) << " (" << floor_source << ")\n"
            << "grad norm         " << fmt(rep.grad_norm, 4) << " (tol " << fmt(rep.thresholds.grad_tol, 4)
            << ")\n"
            << "balance residual  " << fmt(rep.balance_residual, 4) << "\n"
            << "hessian           min=" << fmt(rep.hessian.smallest, 6)
            << " max=" << fmt(rep.hessian.largest, 6) << " (eig tol " << fmt(rep.thresholds.eig_tol, 4)
            << (rep.hessian.dense ? ", dense" : ", lanczos") << ")\n";
  if (rep.blocks) {
    const auto& b = *rep.blocks;
    std::cout << "residual blocks   r11_dev=" << fmt(double(b.r11_deviation), 4)
              << " r12=" << fmt(double(b.r12_norm), 4) << " r21=" << fmt(double(b.r21_norm), 4)
              << " |R|_F=" << fmt(double(b.residual_norm), 4) << "\n"
              << "sigma1(R22)       " << fmt(double(b.sigma1_r22), 6) << " vs lambda "
              << fmt(point.lambda) << "\n";
    if (!rep.q_eigs.empty()) std::cout << "min q eig         " << fmt(rep.q_eigs.front(), 6) << "\n";
  }
  if (rep.certificate) {
    const auto& c = *rep.certificate;
    std::cout << "certificate       |R|_op=" << fmt(c.op_norm_r, 6) << " op_norm_ok=" << c.op_norm_ok
              << " certified_global=" << c.certified_global << "\n";
    if (!c.advisory.empty()) std::cout << "  " << c.advisory << "\n";
  }
}

void run_sweep(const CLI::App& app, const Globals& g, SweepConfig cfg, const TrainFlags& tf) {
  const fs::path out = require_out(g, "sweep-boundary");
  cfg.train = tf.resolve();
  cfg.workers = g.workers;
  fs::create_directories(out);
  write_snapshot(app, out);
  const SweepResult res = boundary_sweep(cfg, out, [](const std::string& line) {
    std::cerr << line << std::endl;
  });
  if (g.as_json()) {
    json rows = json::array();
    for (const auto& b : res.boundaries)
      rows.push_back({{"KN", b.kn}, {"cstar", opt_num(b.cstar)}, {"c_emp", num(b.c_emp)},
                      {"spearman", num(b.spearman)}});
    json j = {{"config_hash", res.hash}, {"boundaries", rows}, {"c_bar", opt_num(res.c_bar)},
              {"cstar_theory", opt_num(res.cstar_theory)}};
    if (res.tw_fit) j["tw_fit"] = {{"cstar_inf", res.tw_fit->cstar_inf}, {"b", res.tw_fit->b}};
    print_json(j);
    return;
  }
  std::cout << "config_hash " << res.hash << "\nKN\tCstar\tc_emp\tspearman\n";
  for (const auto& b : res.boundaries)
    std::cout << b.kn << "\t" << (b.cstar ? fixed(*b.cstar, 4) : "none") << "\t" << fmt(b.c_emp, 4)
              << "\t" << fmt(b.spearman, 3) << "\n";
  if (res.c_bar)
    std::cout << "c_bar = " << fmt(*res.c_bar, 4)
              << (res.cstar_theory ? "  Cstar = " + fixed(*res.cstar_theory, 3) : "") << "\n";
  if (res.tw_fit)
    std::cout << "TW fit: Cstar_inf = " << fixed(res.tw_fit->cstar_inf, 3)
              << "  b = " << fixed(res.tw_fit->b, 3) << "\n";
}

void run_fit_cstar(const Globals& g, const std::string& summary, double min_kn) {
  const auto table = read_summary_table(summary);
  const CstarFitReport rep = fit_cstar(table, min_kn);
  if (g.as_json()) {
    json j = {{"c_bar", num(rep.c_bar)}, {"cstar_theory", num(rep.cstar_theory)},
              {"c_points", rep.c_points}};
    if (rep.tw)
      j["tw_fit"] = {{"cstar_inf", rep.tw->cstar_inf}, {"b", rep.tw->b},
                     {"residual_norm", rep.tw->residual_norm}, {"points", rep.tw->points}};
    print_json(j);
    return;
  }
  std::cout << "c_bar = " << fixed(rep.c_bar, 4) << " over " << rep.c_points << " rows with KN >= "
            << fmt(min_kn) << "\n"
            << "Cstar (self-consistent) = " << fixed(rep.cstar_theory, 3) << "\n";
  if (rep.tw)
    std::cout << "Cstar_inf = " << fixed(rep.tw->cstar_inf, 3) << "\n"
              << "b = " << fixed(rep.tw->b, 3) << "\n"
              << "residual = " << fmt(rep.tw->residual_norm, 3) << " over " << rep.tw->points
              << " points\n";
}

void run_thresholds(const Globals& g, long long m, long long n, long long K, long long N,
                    double cstar, const std::vector<int>& ranks) {
  const ThresholdReport rep = threshold_report(m, n, K, N, cstar, ranks);
  if (g.as_json()) {
    json rho = json::array();
    for (const auto& [r, f] : rep.rho_at) rho.push_back({{"rank", r}, {"rho", f}});
    print_json({{"m", m}, {"n", n}, {"K", K}, {"N", N}, {"cstar", cstar},
                {"old_min_rank", rep.old_min_rank},
                {"old_min_rank_quoted", opt_num(rep.quoted_old_rank)},
                {"new_min_rank", opt_num(rep.new_min_rank)},
                {"max_capacity", rep.max_capacity}, {"rho_at", rho}});
    return;
  }
  std::cout << "old_min_rank = " << rep.old_min_rank << " (computed)";
  if (rep.quoted_old_rank) std::cout << ", " << *rep.quoted_old_rank << " (quoted)";
  std::cout << "\n";
  if (rep.new_min_rank)
    std::cout << "new_min_rank = " << *rep.new_min_rank << "\n";
  else
    std::cout << "new_min_rank = infeasible (max capacity " << fmt(rep.max_capacity, 10) << " <= "
              << fmt(cstar * double(K * N), 10) << ")\n";
  std::cout << "cstar = " << fmt(cstar) << "  KN = " << K * N << "\n";
  for (const auto& [r, f] : rep.rho_at) std::cout << "rho(r=" << r << ") = " << fmt(f, 6) << "\n";
}

void run_pl(const Globals& g, const std::string& record_path, std::optional<double> l_star_flag,
            int stage, double guard) {
  const RunRecord rec = load_run_record(record_path);
  const auto& trace = rec.result.trace;
  const int last = int(rec.config.lambda_schedule.size()) - 1;
  const int use_stage = stage < 0 ? last : stage;
  std::vector<std::pair<double, double>> traj;
  for (const auto& t : trace)
    if (t.stage == use_stage) traj.emplace_back(t.total_loss, t.grad_norm);
  double l_star = l_star_flag.value_or(double(rec.result.loss.total));
  if (!l_star_flag)
    for (const auto& [l, gn] : traj) l_star = std::min(l_star, l);
  const PLEstimate est = pl_estimate(traj, l_star, guard);
  if (g.as_json()) {
    print_json({{"mu_hat", num(est.mu_hat)}, {"l_star", est.l_star}, {"stage", use_stage},
                {"pairs_used", est.pairs_used}, {"trajectory_length", est.trajectory_length}});
    return;
  }
  std::cout << "mu_hat = " << fmt(est.mu_hat, 6) << "\n"
            << "l_star = " << fmt(est.l_star, 12) << "\n"
            << "stage = " << use_stage << "  pairs used " << est.pairs_used << " of "
            << est.trajectory_length << "\n";
}

void run_rank_select(const CLI::App& app, const Globals& g, RankSelectionConfig cfg,
                     const TrainFlags& tf) {
  cfg.train = tf.resolve();
  cfg.workers = g.workers;
  const RankSelectionResult res = rank_selection_experiment(cfg, [](const std::string& line) {
    std::cerr << line << std::endl;
  });
  std::ostringstream table;
  table << "rank\ttrain_acc\ttest_acc\n";
  for (int r : cfg.ranks)
    table << r << "\t" << fixed(res.mean_train_accuracy(r), 4) << "\t"
          << fixed(res.mean_test_accuracy(r), 4) << "\n";
  if (!g.out.empty()) {
    const fs::path out(g.out);
    write_file_atomic(out / "rank_select.tsv", table.str());
    write_snapshot(app, out);
  }
  if (g.as_json()) {
    json rows = json::array();
    for (int r : cfg.ranks)
      rows.push_back({{"rank", r}, {"train_accuracy", num(res.mean_train_accuracy(r))},
                      {"test_accuracy", num(res.mean_test_accuracy(r))}});
    print_json({{"K", res.K}, {"planted_rank", res.planted_rank}, {"n_train", res.n_train},
                {"n_test", res.n_test}, {"ranks", rows}});
    return;
  }
  std::cout << "K=" << res.K << " planted_rank=" << res.planted_rank << " n_train=" << res.n_train
            << " n_test=" << res.n_test << "\n"
            << table.str();
}

BlockPartition parse_blocks(const std::string& spec, int m, int n) {
  if (spec.empty() || spec == "all") return BlockPartition::whole(m, n);
  const auto colon = spec.find(':');
  require(colon != std::string::npos, ErrorClass::Config,
          "--blocks takes all, rows:h1,h2,... or cols:w1,w2,...");
  const std::string kind = spec.substr(0, colon);
  std::vector<int> sizes;
  std::stringstream in(spec.substr(colon + 1));
  for (std::string part; std::getline(in, part, ',');)
    sizes.push_back(int(parse_int(part, "block size")));
  if (kind == "rows") return BlockPartition::row_bands(m, n, sizes);
  if (kind == "cols") return BlockPartition::col_bands(m, n, sizes);
  fail(ErrorClass::Config, "unknown block kind '" + kind + "'");
}

void run_jstats(const CLI::App& app, const Globals& g, const std::string& op_path,
                const std::string& blocks, StatsOptions opt) {
  const FeatureOperator<double> op = load_operator(op_path);
  opt.workers = g.workers;
  const StatsReport rep =
      jacobian_stats(op, parse_blocks(blocks, op.rows(), op.cols()), opt, g.caps);
  if (!g.out.empty()) write_snapshot(app, fs::path(g.out));
  if (g.as_json()) {
    json bl = json::array();
    for (const auto& b : rep.blocks)
      bl.push_back({{"name", b.name}, {"entries", b.entries}, {"sampled", b.sampled},
                    {"mean", b.mean}, {"variance", b.variance}, {"skewness", b.skewness},
                    {"excess_kurtosis", b.excess_kurtosis}, {"ks_distance", b.ks_distance}});
    json j = {{"blocks", bl},
              {"cross_mean_abs_corr", opt_num(rep.cross_mean_abs_corr)},
              {"cross_max_abs_corr", opt_num(rep.cross_max_abs_corr)}};
    if (rep.gram)
      j["gram"] = {{"top", rep.gram->top}, {"smallest_nonzero", rep.gram->smallest_nonzero},
                   {"condition_number", rep.gram->condition_number},
                   {"effective_rank", rep.gram->effective_rank}, {"threshold", rep.gram->threshold}};
    else
      j["gram_note"] = rep.gram_note;
    print_json(j);
    return;
  }
  auto row = [&](const std::string& label, auto value) {
    std::cout << std::left << std::setw(18) << label;
    for (const auto& b : rep.blocks) std::cout << "\t" << value(b);
    std::cout << "\n";
  };
  row("Statistic", [](const MarginalStats& b) { return b.name; });
  row("Skewness", [](const MarginalStats& b) { return fixed(b.skewness, 4); });
  row("Excess kurtosis", [](const MarginalStats& b) { return fixed(b.excess_kurtosis, 4); });
  row("KS distance", [](const MarginalStats& b) { return fixed(b.ks_distance, 4); });
  row("Mean", [](const MarginalStats& b) { return fmt(b.mean, 4); });
  row("Variance", [](const MarginalStats& b) { return fmt(b.variance, 4); });
  row("Entries", [](const MarginalStats& b) {
    return std::to_string(b.entries) +
           (b.sampled < b.entries ? " (sampled " + std::to_string(b.sampled) + ")" : "");
  });
  if (rep.gram)
    std::cout << "gram: top=" << fmt(rep.gram->top, 4)
              << " smallest_nonzero=" << fmt(rep.gram->smallest_nonzero, 4)
              << " condition=" << fmt(rep.gram->condition_number, 4)
              << " effective_rank=" << rep.gram->effective_rank << " (threshold "
              << fmt(rep.gram->threshold) << ")\n";
  else
    std::cout << rep.gram_note << "\n";
  if (rep.cross_mean_abs_corr)
    std::cout << "cross-block |rho|: mean=" << fixed(*rep.cross_mean_abs_corr, 4)
              << " max=" << fixed(*rep.cross_max_abs_corr, 4) << "\n";
}

int exit_code_for(ErrorClass cls) {
  switch (cls) {
    case ErrorClass::Config:
      return 2;
    case ErrorClass::CapExceeded:
      return 3;
    case ErrorClass::InputMissing:
      return 4;
    default:
      return 1;
  }
}

std::string one_line(std::string text) {
  for (char& c : text)
    if (c == '\n' || c == '\r') c = ' ';
  return text;
}

void report_error(std::string_view cls, const std::string& message) {
  std::cerr << "error class=" << cls << " message=\"" << one_line(message) << "\"" << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank adapter landscape toolkit", "lorank"};
  app.set_config("--config", "", "INI file; flags given on the command line win");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--workers", g.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--format", g.format, "text or json")
      ->capture_default_str()
      ->check(CLI::IsMember({"text", "json"}));
  app.add_flag_callback("--json", [&g] { g.format = "json"; }, "Same as --format json");
  app.add_option("--generator", g.generator, "RNG generator id (must match the build)")
      ->capture_default_str();
  app.add_option("--max_operator_bytes", g.caps.max_operator_bytes, "Operator memory cap")
      ->capture_default_str();
  app.add_option("--dense_hessian_dim", g.caps.dense_hessian_dim, "Largest dense Hessian")
      ->capture_default_str();
  app.add_option("--dense_gram_dim", g.caps.dense_gram_dim, "Largest dense Gram matrix")
      ->capture_default_str();
  app.add_option("--dense_tangent_dim", g.caps.dense_tangent_dim, "Largest dense tangent operator")
      ->capture_default_str();

  // gen
  InstanceFlags gen_flags;
  auto* gen = app.add_subcommand("gen", "Generate a Gaussian operator and a planted instance");
  add_instance_options(gen, gen_flags);

  // train
  InstanceFlags train_inst;
  TrainFlags train_flags;
  std::string train_instance;
  auto* train_cmd = app.add_subcommand("train", "Train from one or more seeds and write run records");
  train_cmd->add_option("--instance", train_instance, "Instance directory (else generate inline)");
  add_instance_options(train_cmd, train_inst);
  add_train_options(train_cmd, train_flags, true);

  // analyze
  std::string analyze_record, analyze_instance;
  std::optional<double> analyze_floor;
  Tolerances analyze_tol;
  auto* analyze = app.add_subcommand("analyze", "Classify the point stored in a run record");
  analyze->add_option("--record", analyze_record, "Run record (JSON)")->required();
  analyze->add_option("--instance", analyze_instance, "Override the record's instance path");
  analyze->add_option("--floor", analyze_floor,
                      "Global loss floor (default: least-squares floor for MSE, else the point)");
  add_tolerance_options(analyze, analyze_tol);

  // sweep-boundary
  SweepConfig sweep_cfg;
  TrainFlags sweep_train;
  auto* sweep = app.add_subcommand("sweep-boundary", "Spurious-fraction sweep over (KN, rho)");
  sweep->add_option("--kn_grid", sweep_cfg.kn_grid, "KN values")->capture_default_str();
  sweep->add_option("--rho_grid", sweep_cfg.rho_grid, "Target dimension fractions")->capture_default_str();
  sweep->add_option("--rank", sweep_cfg.rank, "Adapter rank r")->capture_default_str();
  sweep->add_option("--seeds_per_cell", sweep_cfg.seeds_per_cell, "Runs per cell")->capture_default_str();
  sweep->add_option("--outputs", sweep_cfg.outputs, "K")->capture_default_str();
  sweep->add_option("--target_rank", sweep_cfg.target_rank, "Planted rank")->capture_default_str();
  sweep->add_option("--noise_std", sweep_cfg.noise_std, "Label noise")->capture_default_str();
  sweep->add_option("--spurious_threshold", sweep_cfg.spurious_threshold,
                    "Boundary: first rho with fraction below this")
      ->capture_default_str();
  sweep->add_option("--master_seed", sweep_cfg.master_seed, "Root of all derived seeds")
      ->capture_default_str();
  add_tolerance_options(sweep, sweep_cfg.tol);
  add_train_options(sweep, sweep_train, false);

  // fit-cstar
  std::string fit_summary;
  double fit_min_kn = 32;
  auto* fit = app.add_subcommand("fit-cstar", "Fit c-bar, Cstar and the finite-size law to a summary table");
  fit->add_option("--summary", fit_summary, "TSV with columns KN, Cstar, c_emp")->required();
  fit->add_option("--min_kn", fit_min_kn, "Smallest KN averaged into c-bar")->capture_default_str();

  // thresholds
  long long th_m = 768, th_n = 768, th_K = 2, th_N = 32;
  double th_cstar = 1.35;
  std::vector<int> th_ranks = {1, 2, 4, 8, 16};
  auto* thresholds = app.add_subcommand("thresholds", "Old and new minimum ranks for a shape");
  thresholds->add_option("--m", th_m, "Rows")->capture_default_str();
  thresholds->add_option("--n", th_n, "Columns")->capture_default_str();
  thresholds->add_option("--K", th_K, "Outputs per sample")->capture_default_str();
  thresholds->add_option("--N", th_N, "Samples")->capture_default_str();
  thresholds->add_option("--cstar", th_cstar, "Boundary constant")->capture_default_str();
  thresholds->add_option("--ranks", th_ranks, "Ranks to report rho for")->capture_default_str();

  // pl-estimate
  std::string pl_record;
  std::optional<double> pl_l_star;
  int pl_stage = -1;
  double pl_guard = 1e-12;
  auto* pl = app.add_subcommand("pl-estimate", "Empirical PL constant from a run record's trace");
  pl->add_option("--record", pl_record, "Run record (JSON)")->required();
  pl->add_option("--l_star", pl_l_star, "Reference loss (default: lowest loss in the stage)");
  pl->add_option("--stage", pl_stage, "Schedule stage; negative means the last")->capture_default_str();
  pl->add_option("--guard", pl_guard, "Skip pairs within this of l_star")->capture_default_str();

  // rank-select
  RankSelectionConfig rs_cfg;
  TrainFlags rs_train;
  rs_train.cfg.max_iters = 20000;
  auto* rs = app.add_subcommand("rank-select", "Train/test accuracy across ranks on a planted CE task");
  rs->add_option("--K", rs_cfg.K, "Classes")->capture_default_str();
  rs->add_option("--planted_rank", rs_cfg.planted_rank, "Rank of the planted target")->capture_default_str();
  rs->add_option("--m", rs_cfg.m, "Rows")->capture_default_str();
  rs->add_option("--n", rs_cfg.n, "Columns")->capture_default_str();
  rs->add_option("--n_train", rs_cfg.n_train, "Training samples")->capture_default_str();
  rs->add_option("--n_test", rs_cfg.n_test, "Test samples; 0 means 50 x n_train")->capture_default_str();
  rs->add_option("--ranks", rs_cfg.ranks, "Ranks to compare")->capture_default_str();
  rs->add_option("--seeds", rs_cfg.seeds, "Seeds per rank")->capture_default_str();
  rs->add_option("--master_seed", rs_cfg.master_seed, "Root of all derived seeds")->capture_default_str();
  add_train_options(rs, rs_train, false);

  // jstats
  std::string js_operator, js_blocks = "all";
  StatsOptions js_opt;
  auto* js = app.add_subcommand("jstats", "Entry statistics and Gram spectrum of an operator");
  js->add_option("--operator", js_operator, "Operator or instance directory")->required();
  js->add_option("--blocks", js_blocks, "all, rows:h1,h2,... or cols:w1,w2,...")->capture_default_str();
  js->add_option("--threshold", js_opt.effective_rank_threshold, "Effective-rank cutoff relative to the top")
      ->capture_default_str();
  js->add_option("--max_entries", js_opt.max_entries, "Subsample blocks above this size")
      ->capture_default_str();
  js->add_option("--seed", js_opt.seed, "Subsampling seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("ConfigError", e.what());
    return 2;
  }

  try {
    require(g.generator == kGeneratorId, ErrorClass::Config,
            "generator '" + g.generator + "' differs from this build's '" + std::string(kGeneratorId) + "'");
    if (*gen) run_gen(app, g, gen_flags);
    else if (*train_cmd) run_train(app, g, train_instance, train_inst, train_flags);
    else if (*analyze) run_analyze(g, analyze_record, analyze_instance, analyze_floor, analyze_tol);
    else if (*sweep) run_sweep(app, g, sweep_cfg, sweep_train);
    else if (*fit) run_fit_cstar(g, fit_summary, fit_min_kn);
    else if (*thresholds) run_thresholds(g, th_m, th_n, th_K, th_N, th_cstar, th_ranks);
    else if (*pl) run_pl(g, pl_record, pl_l_star, pl_stage, pl_guard);
    else if (*rs) run_rank_select(app, g, rs_cfg, rs_train);
    else if (*js) run_jstats(app, g, js_operator, js_blocks, js_opt);
  } catch (const Error& e) {
    report_error(to_string(e.error_class()), e.what());
    return exit_code_for(e.error_class());
  } catch (const std::exception& e) {
    report_error("InternalError", e.what());
    return 1;
  }
  return 0;
}
