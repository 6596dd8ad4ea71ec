#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lorank/landscape.hpp"
#include "lorank/optimizer.hpp"
#include "lorank/theory.hpp"

namespace lorank {

using Logger = std::function<void(const std::string&)>;

// 17 points from 0.8 to 2.0 in steps of 0.075.
std::vector<double> default_rho_grid();

// Smallest square dims m = n with r(m + n) - r^2 >= rho * KN (and m >= r).
int square_dim_for(double rho, int kn, int rank);

struct SweepConfig {
  std::vector<int> kn_grid = {8, 16, 32, 64};
  std::vector<double> rho_grid = default_rho_grid();
  int rank = 1;
  int seeds_per_cell = 50;
  int outputs = 2;  // K; every KN must be a multiple
  int target_rank = 1;
  double noise_std = 0.01;
  double spurious_threshold = 0.05;
  std::uint64_t master_seed = 0;
  TrainConfig train;
  Tolerances tol;
  int workers = 1;
};

void validate(const SweepConfig& cfg);

// FNV-1a of every setting that influences a cell's records. The KN and rho
// grids are excluded so that extending a grid reuses finished cells.
std::string config_hash(const SweepConfig& cfg);

struct SweepRecord {
  int kn = 0, K = 0, N = 0, m = 0, n = 0, rank = 0;
  double rho = 0.0;
  int seed_index = 0;
  std::uint64_t seed = 0;           // init seed of the run
  std::uint64_t instance_seed = 0;  // seed of operator and labels
  Classification classification = Classification::NotConverged;
  bool converged = false;
  double data_loss = 0.0, total_loss = 0.0, grad_norm = 0.0, min_eig = 0.0;
  double balance = 0.0, balance_scale = 0.0;  // |u^T u - v^T v|_F, |u^T u|_F
  double r11_deviation = 0.0, r12_norm = 0.0, r21_norm = 0.0, residual_norm = 0.0;
  double sigma1_r22 = 0.0;
  double lambda = 0.0, floor = 0.0;
  int effective_rank = 0;
  long iterations = 0, newton_steps = 0;
  std::string note;
  std::string hash;

  bool operator==(const SweepRecord&) const = default;
};

std::string to_line(const SweepRecord& rec);
SweepRecord parse_record_line(const std::string& line);

struct SweepCell {
  int kn = 0, m = 0, n = 0;
  double rho = 0.0;
  std::vector<SweepRecord> runs;
  bool resumed = false;

  int count(Classification c) const;
  double spurious_fraction() const;
};

struct GridPoint {
  int kn = 0;
  double rho_target = 0.0;
  double rho = 0.0;  // realized
  int m = 0;
  double fraction = 0.0;
};

struct BoundaryEstimate {
  int kn = 0;
  std::optional<double> cstar;        // realized rho of the first grid point below threshold
  std::optional<double> rho_target;   // the grid value it realizes
  double c_emp = 0.0;                 // NaN when undefined
  double spearman = 0.0;              // rho vs fraction; NaN when undefined
};

struct SweepResult {
  std::string hash;
  std::vector<SweepCell> cells;  // unique (KN, m), in grid order
  std::vector<GridPoint> grid;
  std::vector<BoundaryEstimate> boundaries;
  std::optional<double> c_bar;  // mean c_emp over KN >= 32
  std::optional<double> cstar_theory;
  std::optional<TracyWidomFit> tw_fit;
};

// Runs (or resumes) every cell. With an output directory, cells are persisted
// as records/KN<kn>_m<m>.txt and summary.tsv, cells.tsv and fits.txt are
// rewritten at the end.
SweepResult boundary_sweep(const SweepConfig& cfg,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                           const Logger& log = {});

// Recomputes grid, boundaries and fits from finished cells.
void summarize(const SweepConfig& cfg, SweepResult& result);

void write_sweep_outputs(const SweepResult& result, const std::filesystem::path& dir);

// Table layout KN, Cstar, c_emp; used by fit-cstar.
std::vector<std::pair<double, double>> read_summary_table(const std::filesystem::path& file);

struct CstarFitReport {
  double c_bar = 0.0;
  double cstar_theory = 0.0;
  std::size_t c_points = 0;
  std::optional<TracyWidomFit> tw;
};

CstarFitReport fit_cstar(const std::vector<std::pair<double, double>>& table, double min_kn = 32);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct CeSweepConfig {
  int m = 32, n = 32, K = 2, N = 32;
  int target_rank = 1;
  std::vector<int> ranks = {1, 2, 4, 8, 12, 16, 24};
  int seeds = 5;
  std::uint64_t master_seed = 0;
  TrainConfig train;
  Tolerances tol;
  int workers = 1;
};

struct CeRun {
  int rank = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  Classification classification = Classification::NotConverged;
  double data_loss = 0.0, total_loss = 0.0, grad_norm = 0.0, min_eig = 0.0;
  double train_accuracy = 0.0;
  double mu_hat = 0.0;  // NaN when the estimate is undefined
  std::string note;
};

struct CeSweepResult {
  std::vector<CeRun> runs;
  int spurious_count() const;
  bool all_mu_positive() const;
};

CeSweepResult ce_consistency_sweep(const CeSweepConfig& cfg, const Logger& log = {});

// Fraction of samples whose argmax prediction matches the one-hot label.
double accuracy(const Vector<double>& logits, const Vector<double>& labels, int K);

struct RankSelectionConfig {
  int K = 2;
  int planted_rank = 1;
  int m = 20, n = 20;
  int n_train = 100;
  int n_test = 0;  // 0 means 50 * n_train
  std::vector<int> ranks = {1, 2, 4, 8};
  int seeds = 5;
  std::uint64_t master_seed = 0;
  TrainConfig train;
  int workers = 1;
};

struct RankSelectionEntry {
  int rank = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  double train_loss = 0.0, test_loss = 0.0;
  double train_accuracy = 0.0, test_accuracy = 0.0;
  bool converged = false;
};

struct RankSelectionResult {
  int K = 0, planted_rank = 0, n_train = 0, n_test = 0;
  std::vector<RankSelectionEntry> entries;

  double mean_test_accuracy(int rank) const;
  double mean_train_accuracy(int rank) const;
};

RankSelectionResult rank_selection_experiment(const RankSelectionConfig& cfg,
                                              const Logger& log = {});

}  // namespace lorank
