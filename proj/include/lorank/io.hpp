#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lorank/optimizer.hpp"
#include "lorank/synthetic.hpp"

namespace lorank {

// Plain-text key=value manifest; '#' starts a comment line.
using Manifest = std::map<std::string, std::string>;

Manifest read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, const Manifest& manifest);

// Writes `contents` to a sibling temp file and renames it over `file`.
void write_file_atomic(const std::filesystem::path& file, const std::string& contents);

// Raw little-endian float64 tensors.
void write_f64(const std::filesystem::path& file, const double* data, std::size_t count);
std::vector<double> read_f64(const std::filesystem::path& file, std::size_t expected_count);

// Directory: manifest.txt + jacobians.bin, [sample][output][row][col].
void save_operator(const FeatureOperator<double>& op, const std::filesystem::path& dir);
FeatureOperator<double> load_operator(const std::filesystem::path& dir);

// Operator files plus labels.bin, target.bin, noise.bin and baseline.bin.
void save_instance(const ProblemInstance<double>& inst, const std::filesystem::path& dir);
ProblemInstance<double> load_instance(const std::filesystem::path& dir);

std::string format_double(double x);  // shortest round-trip text
double parse_double(const std::string& text, const std::string& what);
long long parse_int(const std::string& text, const std::string& what);

// Self-contained JSON record of one training run.
struct RunRecord {
  std::string instance_path;
  LossKind kind = LossKind::MSE;
  TrainConfig config;
  RunResult<double> result;
};

void save_run_record(const RunRecord& rec, const std::filesystem::path& file);
RunRecord load_run_record(const std::filesystem::path& file);

}  // namespace lorank
