#include "lorank/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>

#include "lorank/io.hpp"

namespace lorank {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t x) {
  std::ostringstream out;
  out << std::hex << x;
  std::string s = out.str();
  return std::string(16 - s.size(), '0') + s;
}

std::string train_fingerprint(const TrainConfig& c) {
  std::ostringstream out;
  out << "init_scale=" << format_double(c.init_scale) << ";step_rule=" << to_string(c.step_rule)
      << ";base_step=" << format_double(c.base_step) << ";max_step=" << format_double(c.max_step)
      << ";armijo=" << format_double(c.armijo) << ";max_iters=" << c.max_iters << ";schedule=";
  for (const auto& s : c.lambda_schedule)
    out << format_double(s.lambda) << ":" << format_double(s.grad_tol) << ",";
  out << ";newton=" << c.newton_refine << ":" << format_double(c.newton_switch) << ":"
      << c.newton_cooldown << ":" << c.polish_steps
      << ";divergence=" << format_double(c.divergence_factor);
  return out.str();
}

bool run_failed(const std::string& diagnostic) {
  return diagnostic.rfind("diverged", 0) == 0 || diagnostic.find("Error") != std::string::npos ||
         diagnostic.rfind("CapExceeded", 0) == 0 || diagnostic.rfind("RankDeficient", 0) == 0;
}

std::string sanitize(std::string text) {
  for (char& c : text)
    if (c == ' ' || c == '\t' || c == '\n' || c == '=') c = '_';
  return text;
}

fs::path cell_file(const fs::path& dir, int kn, int m) {
  return dir / "records" / ("KN" + std::to_string(kn) + "_m" + std::to_string(m) + ".txt");
}

std::optional<std::vector<SweepRecord>> load_cell(const fs::path& file, const std::string& hash,
                                                  int expected) {
  if (!fs::exists(file)) return std::nullopt;
  std::ifstream in(file);
  std::vector<SweepRecord> runs;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      runs.push_back(parse_record_line(line));
      if (runs.back().hash != hash) return std::nullopt;
    }
  } catch (const Error&) {
    return std::nullopt;
  }
  if (int(runs.size()) != expected) return std::nullopt;
  for (int i = 0; i < expected; ++i)
    if (runs[i].seed_index != i) return std::nullopt;
  return runs;
}

SweepCell run_cell(const SweepConfig& cfg, const std::string& hash, int kn, int m) {
  const int n = m, r = cfg.rank, K = cfg.outputs, N = kn / K;
  SweepCell cell;
  cell.kn = kn;
  cell.m = m;
  cell.n = n;
  cell.rho = dim_fraction(m, n, r, K, N);
  const std::uint64_t cell_seed =
      derive_seed(cfg.master_seed, {std::uint64_t(kn), std::uint64_t(m), std::uint64_t(n),
                                    std::uint64_t(r)});
  const std::uint64_t inst_seed = derive_seed(cell_seed, {1});

  SweepRecord base;
  base.kn = kn;
  base.K = K;
  base.N = N;
  base.m = m;
  base.n = n;
  base.rank = r;
  base.rho = cell.rho;
  base.instance_seed = inst_seed;
  base.lambda = cfg.train.final_lambda();
  base.hash = hash;

  TrainConfig tc = cfg.train;
  tc.rank = r;
  tc.seeds.clear();
  for (int s = 0; s < cfg.seeds_per_cell; ++s) tc.seeds.push_back(derive_seed(cell_seed, {2, std::uint64_t(s)}));

  try {
    const auto op = std::make_shared<const FeatureOperator<double>>(
        gen_operator<double>(m, n, K, N, inst_seed));
    const ProblemInstance<double> inst =
        gen_instance<double>(op, cfg.target_rank, cfg.noise_std, LossKind::MSE, inst_seed);
    const auto runs = multi_seed(inst, tc, LossKind::MSE, 1);

    double floor = least_squares_floor(inst);
    for (const auto& run : runs)
      if (run.converged) floor = std::min(floor, double(run.loss.data_loss));

    for (int s = 0; s < cfg.seeds_per_cell; ++s) {
      const auto& run = runs[s];
      SweepRecord rec = base;
      rec.seed_index = s;
      rec.seed = tc.seeds[s];
      rec.floor = floor;
      rec.converged = run.converged;
      rec.iterations = run.iterations;
      rec.newton_steps = run.newton_steps;
      rec.note = sanitize(run.diagnostic);
      if (run.point.u.size() == 0) {
        cell.runs.push_back(rec);
        continue;
      }
      try {
        const auto rep = analyze_point(inst, run.point, LossKind::MSE, floor,
                                       !run_failed(run.diagnostic), cfg.tol);
        rec.classification = rep.classification;
        rec.data_loss = double(rep.loss.data_loss);
        rec.total_loss = double(rep.loss.total);
        rec.grad_norm = run.grad_norm;
        rec.min_eig = rep.hessian.smallest;
        rec.balance = rep.balance_residual;
        rec.balance_scale = (run.point.u.transpose() * run.point.u).norm();
        rec.effective_rank = rep.effective_rank;
        if (rep.blocks) {
          rec.r11_deviation = double(rep.blocks->r11_deviation);
          rec.r12_norm = double(rep.blocks->r12_norm);
          rec.r21_norm = double(rep.blocks->r21_norm);
          rec.residual_norm = double(rep.blocks->residual_norm);
          rec.sigma1_r22 = double(rep.blocks->sigma1_r22);
        } else {
          rec.residual_norm = double(residual_matrix(inst, run.point, LossKind::MSE).norm());
        }
      } catch (const Error& e) {
        rec.classification = Classification::NotConverged;
        rec.note = sanitize(std::string(to_string(e.error_class())) + ": " + e.what());
      }
      cell.runs.push_back(rec);
    }
  } catch (const Error& e) {
    cell.runs.clear();
    for (int s = 0; s < cfg.seeds_per_cell; ++s) {
      SweepRecord rec = base;
      rec.seed_index = s;
      rec.seed = tc.seeds[s];
      rec.note = sanitize(std::string(to_string(e.error_class())) + ": " + e.what());
      cell.runs.push_back(rec);
    }
  }
  return cell;
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::vector<double> default_rho_grid() {
  std::vector<double> grid;
  for (int i = 0; i < 17; ++i) grid.push_back(0.8 + 0.075 * i);
  return grid;
}

int square_dim_for(double rho, int kn, int rank) {
  require(rho > 0 && kn >= 1 && rank >= 1, ErrorClass::Domain, "square_dim_for needs positive inputs");
  const double target = rho * kn - 1e-9;
  int m = rank;
  while (double(lora_capacity(m, m, rank)) < target) ++m;
  return m;
}

void validate(const SweepConfig& cfg) {
  validate(cfg.train);
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorClass::Config, msg); };
  check(!cfg.kn_grid.empty() && !cfg.rho_grid.empty(), "sweep grids must be nonempty");
  check(std::is_sorted(cfg.rho_grid.begin(), cfg.rho_grid.end()), "rho grid must be ascending");
  check(cfg.rank >= 1 && cfg.outputs >= 1 && cfg.seeds_per_cell >= 1, "rank, outputs and seeds must be >= 1");
  check(cfg.target_rank >= 1, "target_rank must be >= 1");
  check(cfg.noise_std >= 0, "noise_std must be non-negative");
  check(cfg.spurious_threshold > 0 && cfg.spurious_threshold <= 1, "spurious_threshold must lie in (0, 1]");
  for (int kn : cfg.kn_grid)
    check(kn >= cfg.outputs && kn % cfg.outputs == 0,
          "KN = " + std::to_string(kn) + " is not a multiple of K = " + std::to_string(cfg.outputs));
  for (double rho : cfg.rho_grid) check(rho > 0, "rho grid values must be positive");
}

std::string config_hash(const SweepConfig& cfg) {
  std::ostringstream out;
  out << "generator=" << kGeneratorId << ";rank=" << cfg.rank << ";seeds=" << cfg.seeds_per_cell
      << ";K=" << cfg.outputs << ";target_rank=" << cfg.target_rank
      << ";noise=" << format_double(cfg.noise_std) << ";master=" << cfg.master_seed
      << ";dims=square-min;" << train_fingerprint(cfg.train) << ";tol="
      << format_double(cfg.tol.grad_rel) << ":" << format_double(cfg.tol.eig_rel) << ":"
      << format_double(cfg.tol.rank_rel) << ":" << format_double(cfg.tol.gap_abs) << ":"
      << format_double(cfg.tol.gap_rel);
  return hex(fnv1a(out.str()));
}

std::string to_line(const SweepRecord& r) {
  std::ostringstream out;
  auto d = [](double x) { return format_double(x); };
  out << "hash=" << r.hash << " generator=" << kGeneratorId << " KN=" << r.kn << " K=" << r.K
      << " N=" << r.N << " m=" << r.m << " n=" << r.n << " r=" << r.rank << " rho=" << d(r.rho)
      << " seed_index=" << r.seed_index << " seed=" << r.seed
      << " instance_seed=" << r.instance_seed << " class=" << to_string(r.classification)
      << " converged=" << int(r.converged) << " data_loss=" << d(r.data_loss)
      << " total_loss=" << d(r.total_loss) << " grad_norm=" << d(r.grad_norm)
      << " min_eig=" << d(r.min_eig) << " balance=" << d(r.balance)
      << " balance_scale=" << d(r.balance_scale) << " r11_dev=" << d(r.r11_deviation)
      << " r12=" << d(r.r12_norm) << " r21=" << d(r.r21_norm)
      << " residual_norm=" << d(r.residual_norm) << " sigma1_r22=" << d(r.sigma1_r22)
      << " lambda=" << d(r.lambda) << " floor=" << d(r.floor)
      << " effective_rank=" << r.effective_rank << " iterations=" << r.iterations
      << " newton_steps=" << r.newton_steps << " note=" << (r.note.empty() ? "-" : r.note);
  return out.str();
}

SweepRecord parse_record_line(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) fail(ErrorClass::Format, "record token without '=': " + tok);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) fail(ErrorClass::Format, std::string("record lacks key ") + key);
    return it->second;
  };
  auto i = [&](const char* key) { return parse_int(get(key), key); };
  auto d = [&](const char* key) { return parse_double(get(key), key); };
  if (get("generator") != kGeneratorId) fail(ErrorClass::Format, "record from a different generator");
  SweepRecord r;
  r.hash = get("hash");
  r.kn = int(i("KN"));
  r.K = int(i("K"));
  r.N = int(i("N"));
  r.m = int(i("m"));
  r.n = int(i("n"));
  r.rank = int(i("r"));
  r.rho = d("rho");
  r.seed_index = int(i("seed_index"));
  r.seed = std::stoull(get("seed"));
  r.instance_seed = std::stoull(get("instance_seed"));
  r.classification = parse_classification(get("class"));
  r.converged = i("converged") != 0;
  r.data_loss = d("data_loss");
  r.total_loss = d("total_loss");
  r.grad_norm = d("grad_norm");
  r.min_eig = d("min_eig");
  r.balance = d("balance");
  r.balance_scale = d("balance_scale");
  r.r11_deviation = d("r11_dev");
  r.r12_norm = d("r12");
  r.r21_norm = d("r21");
  r.residual_norm = d("residual_norm");
  r.sigma1_r22 = d("sigma1_r22");
  r.lambda = d("lambda");
  r.floor = d("floor");
  r.effective_rank = int(i("effective_rank"));
  r.iterations = i("iterations");
  r.newton_steps = i("newton_steps");
  r.note = get("note") == "-" ? "" : get("note");
  return r;
}

int SweepCell::count(Classification c) const {
  return int(std::count_if(runs.begin(), runs.end(),
                           [&](const SweepRecord& r) { return r.classification == c; }));
}

double SweepCell::spurious_fraction() const {
  return runs.empty() ? 0.0 : double(count(Classification::SpuriousSOSP)) / double(runs.size());
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorClass::DimensionMismatch, "spearman needs equal lengths");
  if (x.size() < 2) return kNaN;
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return kNaN;
  return sxy / std::sqrt(sxx * syy);
}

void summarize(const SweepConfig& cfg, SweepResult& res) {
  res.grid.clear();
  res.boundaries.clear();
  std::map<std::pair<int, int>, const SweepCell*> by_dims;
  for (const SweepCell& c : res.cells) by_dims[{c.kn, c.m}] = &c;

  std::vector<std::pair<double, double>> tw_points;
  for (int kn : cfg.kn_grid) {
    BoundaryEstimate b;
    b.kn = kn;
    b.c_emp = kNaN;
    std::vector<double> rhos, fractions;
    for (double rho : cfg.rho_grid) {
      const int m = square_dim_for(rho, kn, cfg.rank);
      const SweepCell& cell = *by_dims.at({kn, m});
      GridPoint g{kn, rho, cell.rho, m, cell.spurious_fraction()};
      res.grid.push_back(g);
      rhos.push_back(g.rho);
      fractions.push_back(g.fraction);
      if (!b.cstar && g.fraction < cfg.spurious_threshold) {
        b.cstar = g.rho;
        b.rho_target = rho;
      }
    }
    b.spearman = spearman(rhos, fractions);
    if (b.cstar) {
      if (*b.cstar >= 1.0) b.c_emp = c_from_cstar(*b.cstar);
      tw_points.emplace_back(double(kn), *b.cstar);
    }
    res.boundaries.push_back(b);
  }

  double sum = 0;
  int count = 0;
  for (const auto& b : res.boundaries)
    if (b.kn >= 32 && std::isfinite(b.c_emp)) {
      sum += b.c_emp;
      ++count;
    }
  res.c_bar.reset();
  res.cstar_theory.reset();
  if (count > 0) {
    res.c_bar = sum / count;
    if (*res.c_bar < 1.0) res.cstar_theory = cstar_from_c(*res.c_bar);
  }
  res.tw_fit.reset();
  std::vector<double> kns;
  for (const auto& p : tw_points) kns.push_back(p.first);
  std::sort(kns.begin(), kns.end());
  if (tw_points.size() >= 3 && kns.front() != kns.back()) res.tw_fit = tracy_widom_fit(tw_points);
}

SweepResult boundary_sweep(const SweepConfig& cfg, const std::optional<fs::path>& out_dir,
                           const Logger& log) {
  validate(cfg);
  SweepResult res;
  res.hash = config_hash(cfg);

  // Unique (KN, m) cells in grid order.
  std::vector<std::pair<int, int>> todo;
  for (int kn : cfg.kn_grid)
    for (double rho : cfg.rho_grid) {
      const std::pair<int, int> key{kn, square_dim_for(rho, kn, cfg.rank)};
      if (std::find(todo.begin(), todo.end(), key) == todo.end()) todo.push_back(key);
    }

  res.cells.resize(todo.size());
  std::mutex io_mutex;
  parallel_for(todo.size(), cfg.workers, [&](std::size_t i) {
    const auto [kn, m] = todo[i];
    if (out_dir) {
      if (auto runs = load_cell(cell_file(*out_dir, kn, m), res.hash, cfg.seeds_per_cell)) {
        SweepCell& c = res.cells[i];
        c.kn = kn;
        c.m = c.n = m;
        c.rho = runs->front().rho;
        c.runs = std::move(*runs);
        c.resumed = true;
        if (log) {
          std::lock_guard<std::mutex> lock(io_mutex);
          log("resumed KN=" + std::to_string(kn) + " m=" + std::to_string(m));
        }
        return;
      }
    }
    SweepCell cell = run_cell(cfg, res.hash, kn, m);
    std::lock_guard<std::mutex> lock(io_mutex);
    if (out_dir) {
      std::string text;
      for (const auto& r : cell.runs) text += to_line(r) + "\n";
      write_file_atomic(cell_file(*out_dir, kn, m), text);
    }
    if (log) {
      std::ostringstream msg;
      msg << "cell KN=" << kn << " m=" << m << " rho=" << format_double(cell.rho)
          << " spurious=" << cell.count(Classification::SpuriousSOSP)
          << " global=" << cell.count(Classification::GlobalMin)
          << " saddle=" << cell.count(Classification::StrictSaddle)
          << " not_converged=" << cell.count(Classification::NotConverged);
      log(msg.str());
    }
    res.cells[i] = std::move(cell);
  });

  summarize(cfg, res);
  if (out_dir) write_sweep_outputs(res, *out_dir);
  return res;
}

void write_sweep_outputs(const SweepResult& res, const fs::path& dir) {
  std::ostringstream summary;
  summary << "KN\tCstar\tc_emp\n";
  for (const auto& b : res.boundaries)
    summary << b.kn << '\t' << (b.cstar ? format_double(*b.cstar) : "nan") << '\t'
            << format_double(b.c_emp) << '\n';
  write_file_atomic(dir / "summary.tsv", summary.str());

  std::ostringstream cells;
  cells << "KN\trho_target\trho\tm\tn\tspurious\tglobal\tsaddle\tnot_converged\tfraction\n";
  for (const auto& g : res.grid) {
    const auto it = std::find_if(res.cells.begin(), res.cells.end(),
                                 [&](const SweepCell& c) { return c.kn == g.kn && c.m == g.m; });
    cells << g.kn << '\t' << format_double(g.rho_target) << '\t' << format_double(g.rho) << '\t'
          << g.m << '\t' << it->n << '\t' << it->count(Classification::SpuriousSOSP) << '\t'
          << it->count(Classification::GlobalMin) << '\t'
          << it->count(Classification::StrictSaddle) << '\t'
          << it->count(Classification::NotConverged) << '\t' << format_double(g.fraction) << '\n';
  }
  write_file_atomic(dir / "cells.tsv", cells.str());

  std::ostringstream fits;
  fits << "config_hash=" << res.hash << "\n";
  fits << "c_bar=" << (res.c_bar ? format_double(*res.c_bar) : "nan") << "\n";
  fits << "cstar_theory=" << (res.cstar_theory ? format_double(*res.cstar_theory) : "nan") << "\n";
  if (res.tw_fit) {
    fits << "tw_cstar_inf=" << format_double(res.tw_fit->cstar_inf) << "\n";
    fits << "tw_b=" << format_double(res.tw_fit->b) << "\n";
    fits << "tw_residual=" << format_double(res.tw_fit->residual_norm) << "\n";
  }
  for (const auto& b : res.boundaries)
    fits << "spearman_KN" << b.kn << "=" << format_double(b.spearman) << "\n";
  write_file_atomic(dir / "fits.txt", fits.str());
}

std::vector<std::pair<double, double>> read_summary_table(const fs::path& file) {
  if (!fs::exists(file)) fail(ErrorClass::InputMissing, "missing input: " + file.string());
  std::ifstream in(file);
  std::string line;
  std::vector<std::pair<double, double>> rows;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kn, cstar;
    ls >> kn >> cstar;
    if (kn == "KN") continue;
    if (cstar.empty())
      fail(ErrorClass::Format, file.string() + ":" + std::to_string(lineno) + ": expected KN and Cstar");
    if (cstar == "nan") continue;
    rows.emplace_back(parse_double(kn, "KN"), parse_double(cstar, "Cstar"));
  }
  return rows;
}

CstarFitReport fit_cstar(const std::vector<std::pair<double, double>>& table, double min_kn) {
  CstarFitReport rep;
  double sum = 0;
  for (const auto& [kn, cstar] : table)
    if (kn >= min_kn) {
      sum += c_from_cstar(cstar);
      ++rep.c_points;
    }
  require(rep.c_points > 0, ErrorClass::Domain,
          "no rows with KN >= " + format_double(min_kn) + " to average c over");
  rep.c_bar = sum / double(rep.c_points);
  rep.cstar_theory = cstar_from_c(rep.c_bar);
  if (table.size() >= 3) rep.tw = tracy_widom_fit(table);
  return rep;
}

int CeSweepResult::spurious_count() const {
  return int(std::count_if(runs.begin(), runs.end(), [](const CeRun& r) {
    return r.classification == Classification::SpuriousSOSP;
  }));
}

bool CeSweepResult::all_mu_positive() const {
  return std::all_of(runs.begin(), runs.end(),
                     [](const CeRun& r) { return std::isfinite(r.mu_hat) && r.mu_hat > 0; });
}

double accuracy(const Vector<double>& logits, const Vector<double>& labels, int K) {
  const Index samples = logits.size() / K;
  Index hits = 0;
  for (Index i = 0; i < samples; ++i) {
    Index pred, truth;
    logits.segment(i * K, K).maxCoeff(&pred);
    labels.segment(i * K, K).maxCoeff(&truth);
    hits += pred == truth;
  }
  return samples ? double(hits) / double(samples) : 0.0;
}

CeSweepResult ce_consistency_sweep(const CeSweepConfig& cfg, const Logger& log) {
  validate(cfg.train);
  require(!cfg.ranks.empty() && cfg.seeds >= 1, ErrorClass::Config, "ranks and seeds must be nonempty");
  const std::uint64_t inst_seed = derive_seed(cfg.master_seed, {11});
  const auto op = std::make_shared<const FeatureOperator<double>>(
      gen_operator<double>(cfg.m, cfg.n, cfg.K, cfg.N, inst_seed));
  const ProblemInstance<double> inst =
      gen_instance<double>(op, cfg.target_rank, 0.0, LossKind::CE, inst_seed);

  CeSweepResult out;
  for (int r : cfg.ranks) {
    TrainConfig tc = cfg.train;
    tc.rank = r;
    tc.seeds.clear();
    for (int s = 0; s < cfg.seeds; ++s)
      tc.seeds.push_back(derive_seed(cfg.master_seed, {12, std::uint64_t(r), std::uint64_t(s)}));
    const auto runs = multi_seed(inst, tc, LossKind::CE, cfg.workers);

    double floor = std::numeric_limits<double>::infinity();
    double l_star = std::numeric_limits<double>::infinity();
    for (const auto& run : runs)
      if (run.converged) {
        floor = std::min(floor, double(run.loss.data_loss));
        l_star = std::min(l_star, double(run.loss.total));
      }

    const int last = int(tc.lambda_schedule.size()) - 1;
    for (int s = 0; s < cfg.seeds; ++s) {
      const auto& run = runs[s];
      CeRun rec;
      rec.rank = r;
      rec.seed_index = s;
      rec.seed = tc.seeds[s];
      rec.mu_hat = kNaN;
      rec.note = run.diagnostic;
      if (run.point.u.size() == 0) {
        out.runs.push_back(rec);
        continue;
      }
      try {
        const auto rep = analyze_point(inst, run.point, LossKind::CE,
                                       std::isfinite(floor) ? floor : 0.0,
                                       !run_failed(run.diagnostic), cfg.tol);
        rec.classification = rep.classification;
        rec.data_loss = double(rep.loss.data_loss);
        rec.total_loss = double(rep.loss.total);
        rec.grad_norm = run.grad_norm;
        rec.min_eig = rep.hessian.smallest;
        rec.train_accuracy = accuracy(predict(inst, run.point), inst.labels, inst.K());
        std::vector<std::pair<double, double>> traj;
        for (const auto& t : run.trace)
          if (t.stage == last) traj.emplace_back(t.total_loss, t.grad_norm);
        rec.mu_hat = pl_estimate(traj, l_star).mu_hat;
      } catch (const Error& e) {
        rec.note += std::string(rec.note.empty() ? "" : "; ") + std::string(to_string(e.error_class())) +
                    ": " + e.what();
      }
      if (log) {
        std::ostringstream msg;
        msg << "ce r=" << r << " seed=" << s << " class=" << to_string(rec.classification)
            << " data_loss=" << format_double(rec.data_loss)
            << " mu_hat=" << format_double(rec.mu_hat)
            << " train_acc=" << format_double(rec.train_accuracy);
        log(msg.str());
      }
      out.runs.push_back(rec);
    }
  }
  return out;
}

double RankSelectionResult::mean_test_accuracy(int rank) const {
  double sum = 0;
  int count = 0;
  for (const auto& e : entries)
    if (e.rank == rank) {
      sum += e.test_accuracy;
      ++count;
    }
  return count ? sum / count : kNaN;
}

double RankSelectionResult::mean_train_accuracy(int rank) const {
  double sum = 0;
  int count = 0;
  for (const auto& e : entries)
    if (e.rank == rank) {
      sum += e.train_accuracy;
      ++count;
    }
  return count ? sum / count : kNaN;
}

RankSelectionResult rank_selection_experiment(const RankSelectionConfig& cfg, const Logger& log) {
  validate(cfg.train);
  require(cfg.K >= 2 && cfg.n_train >= 1 && cfg.seeds >= 1 && !cfg.ranks.empty(),
          ErrorClass::Config, "rank selection needs K >= 2, n_train >= 1, seeds and ranks");
  const int n_test = cfg.n_test > 0 ? cfg.n_test : 50 * cfg.n_train;
  const std::uint64_t inst_seed = derive_seed(cfg.master_seed, {21});
  const FeatureOperator<double> full =
      gen_operator<double>(cfg.m, cfg.n, cfg.K, cfg.n_train + n_test, inst_seed);
  const ProblemInstance<double> all =
      gen_instance<double>(full, cfg.planted_rank, 0.0, LossKind::CE, inst_seed);

  auto slice = [&](int first, int count) {
    ProblemInstance<double> part = all;
    part.op = std::make_shared<const FeatureOperator<double>>(full.sample_range(first, count));
    const Index off = Index(first) * cfg.K, len = Index(count) * cfg.K;
    part.labels = all.labels.segment(off, len);
    part.baseline = all.baseline.segment(off, len);
    part.noise = all.noise.segment(off, len);
    return part;
  };
  const ProblemInstance<double> train_set = slice(0, cfg.n_train);
  const ProblemInstance<double> test_set = slice(cfg.n_train, n_test);

  RankSelectionResult res;
  res.K = cfg.K;
  res.planted_rank = cfg.planted_rank;
  res.n_train = cfg.n_train;
  res.n_test = n_test;
  for (int r : cfg.ranks) {
    TrainConfig tc = cfg.train;
    tc.rank = r;
    tc.seeds.clear();
    for (int s = 0; s < cfg.seeds; ++s)
      tc.seeds.push_back(derive_seed(cfg.master_seed, {22, std::uint64_t(s)}));
    const auto runs = multi_seed(train_set, tc, LossKind::CE, cfg.workers);
    for (int s = 0; s < cfg.seeds; ++s) {
      const auto& run = runs[s];
      RankSelectionEntry e;
      e.rank = r;
      e.seed_index = s;
      e.seed = tc.seeds[s];
      e.converged = run.converged;
      if (run.point.u.size() > 0) {
        const Vector<double> train_pred = predict(train_set, run.point);
        const Vector<double> test_pred = predict(test_set, run.point);
        e.train_loss = detail::data_loss(train_set, train_pred, LossKind::CE);
        e.test_loss = detail::data_loss(test_set, test_pred, LossKind::CE);
        e.train_accuracy = accuracy(train_pred, train_set.labels, cfg.K);
        e.test_accuracy = accuracy(test_pred, test_set.labels, cfg.K);
      }
      if (log) {
        std::ostringstream msg;
        msg << "rank-select r=" << r << " seed=" << s << " train_acc="
            << format_double(e.train_accuracy) << " test_acc=" << format_double(e.test_accuracy);
        log(msg.str());
      }
      res.entries.push_back(e);
    }
  }
  return res;
}

}  // namespace lorank
