#include "lorank/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "lorank/rng.hpp"

namespace lorank {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

void require_exists(const fs::path& p) {
  if (!fs::exists(p)) fail(ErrorClass::InputMissing, "missing input: " + p.string());
}

const std::string& manifest_value(const Manifest& m, const std::string& key,
                                  const fs::path& file) {
  auto it = m.find(key);
  if (it == m.end()) fail(ErrorClass::Format, file.string() + ": manifest lacks key '" + key + "'");
  return it->second;
}

double bswap_double(double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  bits = __builtin_bswap64(bits);
  std::memcpy(&x, &bits, sizeof bits);
  return x;
}

Manifest operator_manifest(const FeatureOperator<double>& op) {
  return {{"format", "lorank-operator"},
          {"version", std::to_string(kFormatVersion)},
          {"m", std::to_string(op.rows())},
          {"n", std::to_string(op.cols())},
          {"K", std::to_string(op.outputs())},
          {"N", std::to_string(op.samples())},
          {"entry_scale", format_double(op.entry_scale())},
          {"endianness", "little"},
          {"dtype", "f64"},
          {"layout", "sample,output,row,col"}};
}

json matrix_json(const Matrix<double>& a) {
  json rows = json::array();
  for (Index i = 0; i < a.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < a.cols(); ++j) row.push_back(a(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix<double> matrix_from_json(const json& rows, Index expected_cols) {
  Matrix<double> a(rows.size(), expected_cols);
  for (Index i = 0; i < a.rows(); ++i) {
    require(Index(rows[i].size()) == expected_cols, ErrorClass::Format, "ragged matrix in run record");
    for (Index j = 0; j < a.cols(); ++j) a(i, j) = rows[i][j].get<double>();
  }
  return a;
}

// Non-finite doubles are written as null.
double num(const json& x) {
  return x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>();
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& what) {
  double x = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), x);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    fail(ErrorClass::Format, "cannot parse " + what + " from '" + text + "'");
  return x;
}

long long parse_int(const std::string& text, const std::string& what) {
  long long x = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), x);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    fail(ErrorClass::Format, "cannot parse " + what + " from '" + text + "'");
  return x;
}

Manifest read_manifest(const fs::path& file) {
  require_exists(file);
  std::ifstream in(file);
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorClass::Format, file.string() + ":" + std::to_string(lineno) + ": expected key=value");
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

void write_manifest(const fs::path& file, const Manifest& manifest) {
  std::ostringstream out;
  for (const auto& [k, v] : manifest) out << k << '=' << v << '\n';
  write_file_atomic(file, out.str());
}

void write_file_atomic(const fs::path& file, const std::string& contents) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorClass::InputMissing, "cannot write " + tmp.string());
    out.write(contents.data(), std::streamsize(contents.size()));
    if (!out) fail(ErrorClass::InputMissing, "short write to " + tmp.string());
  }
  fs::rename(tmp, file);
}

void write_f64(const fs::path& file, const double* data, std::size_t count) {
  std::string bytes(count * sizeof(double), '\0');
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(bytes.data(), data, bytes.size());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const double x = bswap_double(data[i]);
      std::memcpy(bytes.data() + i * sizeof(double), &x, sizeof(double));
    }
  }
  write_file_atomic(file, bytes);
}

std::vector<double> read_f64(const fs::path& file, std::size_t expected_count) {
  require_exists(file);
  const std::uintmax_t size = fs::file_size(file);
  const std::uintmax_t expected = expected_count * sizeof(double);
  if (size != expected) {
    fail(ErrorClass::Format, file.string() + ": byte count mismatch, manifest implies " +
                                 std::to_string(expected) + " bytes but file has " +
                                 std::to_string(size));
  }
  std::vector<double> out(expected_count);
  std::ifstream in(file, std::ios::binary);
  in.read(reinterpret_cast<char*>(out.data()), std::streamsize(expected));
  if (!in) fail(ErrorClass::Format, file.string() + ": short read");
  if constexpr (std::endian::native != std::endian::little)
    for (double& x : out) x = bswap_double(x);
  return out;
}

void save_operator(const FeatureOperator<double>& op, const fs::path& dir) {
  fs::create_directories(dir);
  write_f64(dir / "jacobians.bin", op.jacobians().data(), std::size_t(op.jacobians().size()));
  write_manifest(dir / "manifest.txt", operator_manifest(op));
}

FeatureOperator<double> load_operator(const fs::path& dir) {
  require_exists(dir);
  const fs::path mf = dir / "manifest.txt";
  const Manifest man = read_manifest(mf);
  const long long version = parse_int(manifest_value(man, "version", mf), "version");
  if (version != kFormatVersion)
    fail(ErrorClass::Format, mf.string() + ": unknown format version " + std::to_string(version));
  if (auto it = man.find("endianness"); it != man.end() && it->second != "little")
    fail(ErrorClass::Format, mf.string() + ": unsupported endianness '" + it->second + "'");
  const int m = int(parse_int(manifest_value(man, "m", mf), "m"));
  const int n = int(parse_int(manifest_value(man, "n", mf), "n"));
  const int K = int(parse_int(manifest_value(man, "K", mf), "K"));
  const int N = int(parse_int(manifest_value(man, "N", mf), "N"));
  const double scale = parse_double(manifest_value(man, "entry_scale", mf), "entry_scale");
  require(m >= 1 && n >= 1 && K >= 1 && N >= 1, ErrorClass::Format,
          mf.string() + ": dimensions must be positive");
  const std::vector<double> data =
      read_f64(dir / "jacobians.bin", std::size_t(m) * n * K * N);
  RowMajorMatrix<double> jac =
      Eigen::Map<const RowMajorMatrix<double>>(data.data(), Index(K) * N, Index(m) * n);
  return FeatureOperator<double>(m, n, K, N, std::move(jac), scale);
}

void save_instance(const ProblemInstance<double>& inst, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& op = inst.features();
  write_f64(dir / "jacobians.bin", op.jacobians().data(), std::size_t(op.jacobians().size()));
  write_f64(dir / "labels.bin", inst.labels.data(), std::size_t(inst.labels.size()));
  write_f64(dir / "noise.bin", inst.noise.data(), std::size_t(inst.noise.size()));
  write_f64(dir / "baseline.bin", inst.baseline.data(), std::size_t(inst.baseline.size()));
  // Planted target in row-major order, like the slices.
  const RowMajorMatrix<double> target = inst.planted_target;
  write_f64(dir / "target.bin", target.data(), std::size_t(target.size()));
  Manifest man = operator_manifest(op);
  man["format"] = "lorank-instance";
  man["loss_kind"] = std::string(to_string(inst.loss_kind));
  man["noise_std"] = format_double(inst.noise_std);
  man["seed"] = std::to_string(inst.seed);
  man["target_rank"] = std::to_string(inst.target_rank);
  man["generator"] = std::string(kGeneratorId);
  write_manifest(dir / "manifest.txt", man);
}

ProblemInstance<double> load_instance(const fs::path& dir) {
  auto op = std::make_shared<const FeatureOperator<double>>(load_operator(dir));
  const fs::path mf = dir / "manifest.txt";
  const Manifest man = read_manifest(mf);
  ProblemInstance<double> inst;
  inst.op = op;
  const std::size_t kn = std::size_t(op->size());
  auto vec = [&](const char* name) {
    const std::vector<double> d = read_f64(dir / name, kn);
    return Vector<double>(Eigen::Map<const Vector<double>>(d.data(), Index(kn)));
  };
  inst.labels = vec("labels.bin");
  inst.noise = fs::exists(dir / "noise.bin") ? vec("noise.bin") : Vector<double>::Zero(Index(kn));
  inst.baseline =
      fs::exists(dir / "baseline.bin") ? vec("baseline.bin") : Vector<double>::Zero(Index(kn));
  const std::vector<double> t =
      read_f64(dir / "target.bin", std::size_t(op->rows()) * std::size_t(op->cols()));
  inst.planted_target =
      Eigen::Map<const RowMajorMatrix<double>>(t.data(), op->rows(), op->cols());
  inst.loss_kind = parse_loss_kind(manifest_value(man, "loss_kind", mf));
  inst.noise_std = parse_double(manifest_value(man, "noise_std", mf), "noise_std");
  inst.seed = std::uint64_t(std::stoull(manifest_value(man, "seed", mf)));
  inst.target_rank = int(parse_int(manifest_value(man, "target_rank", mf), "target_rank"));
  return inst;
}

void save_run_record(const RunRecord& rec, const fs::path& file) {
  const auto& r = rec.result;
  const auto& c = rec.config;
  json schedule = json::array();
  for (const auto& s : c.lambda_schedule) schedule.push_back({{"lambda", s.lambda}, {"grad_tol", s.grad_tol}});
  json trace = json::array();
  for (const auto& t : r.trace)
    trace.push_back({t.stage, t.iteration, t.total_loss, t.data_loss, t.grad_norm});
  json j = {
      {"format", "lorank-run"},
      {"version", kFormatVersion},
      {"generator", std::string(kGeneratorId)},
      {"instance", rec.instance_path},
      {"loss_kind", std::string(to_string(rec.kind))},
      {"seed", r.seed},
      {"config",
       {{"rank", c.rank},
        {"init_scale", c.init_scale},
        {"step_rule", std::string(to_string(c.step_rule))},
        {"base_step", c.base_step},
        {"max_step", c.max_step},
        {"armijo", c.armijo},
        {"max_iters", c.max_iters},
        {"lambda_schedule", schedule},
        {"record_interval", c.record_interval},
        {"newton_refine", c.newton_refine},
        {"newton_switch", c.newton_switch},
        {"newton_cooldown", c.newton_cooldown},
        {"polish_steps", c.polish_steps},
        {"divergence_factor", c.divergence_factor}}},
      {"converged", r.converged},
      {"stage_reached", r.stage_reached},
      {"iterations", r.iterations},
      {"newton_steps", r.newton_steps},
      {"diagnostic", r.diagnostic},
      {"grad_norm", r.grad_norm},
      {"loss", {{"data", r.loss.data_loss}, {"reg", r.loss.reg_loss}, {"total", r.loss.total}}},
      {"lambda", r.point.lambda},
      {"u", matrix_json(r.point.u)},
      {"v", matrix_json(r.point.v)},
      {"trace_columns", {"stage", "iteration", "total_loss", "data_loss", "grad_norm"}},
      {"trace", trace},
  };
  write_file_atomic(file, j.dump(1) + "\n");
}

RunRecord load_run_record(const fs::path& file) {
  require_exists(file);
  std::ifstream in(file);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorClass::Format, file.string() + ": " + e.what());
  }
  try {
    require(j.value("format", "") == "lorank-run", ErrorClass::Format,
            file.string() + ": not a run record");
    require(j.at("version").get<int>() == kFormatVersion, ErrorClass::Format,
            file.string() + ": unknown run record version");
    RunRecord rec;
    rec.instance_path = j.at("instance").get<std::string>();
    rec.kind = parse_loss_kind(j.at("loss_kind").get<std::string>());
    const json& c = j.at("config");
    rec.config.rank = c.at("rank").get<int>();
    rec.config.init_scale = c.at("init_scale").get<double>();
    rec.config.step_rule = parse_step_rule(c.at("step_rule").get<std::string>());
    rec.config.base_step = c.at("base_step").get<double>();
    rec.config.max_step = c.at("max_step").get<double>();
    rec.config.armijo = c.at("armijo").get<double>();
    rec.config.max_iters = c.at("max_iters").get<long>();
    rec.config.lambda_schedule.clear();
    for (const json& s : c.at("lambda_schedule"))
      rec.config.lambda_schedule.push_back({s.at("lambda").get<double>(), s.at("grad_tol").get<double>()});
    rec.config.record_interval = c.at("record_interval").get<int>();
    rec.config.newton_refine = c.at("newton_refine").get<bool>();
    rec.config.newton_switch = c.at("newton_switch").get<double>();
    rec.config.newton_cooldown = c.at("newton_cooldown").get<int>();
    rec.config.polish_steps = c.at("polish_steps").get<int>();
    rec.config.divergence_factor = c.at("divergence_factor").get<double>();

    auto& r = rec.result;
    r.seed = j.at("seed").get<std::uint64_t>();
    rec.config.seeds = {r.seed};
    r.converged = j.at("converged").get<bool>();
    r.stage_reached = j.at("stage_reached").get<int>();
    r.iterations = j.at("iterations").get<long>();
    r.newton_steps = j.at("newton_steps").get<long>();
    r.diagnostic = j.at("diagnostic").get<std::string>();
    r.grad_norm = num(j.at("grad_norm"));
    r.loss.kind = rec.kind;
    r.loss.data_loss = num(j.at("loss").at("data"));
    r.loss.reg_loss = num(j.at("loss").at("reg"));
    r.loss.total = num(j.at("loss").at("total"));
    const Index rank = rec.config.rank;
    r.point.u = matrix_from_json(j.at("u"), rank);
    r.point.v = matrix_from_json(j.at("v"), rank);
    r.point.lambda = j.at("lambda").get<double>();
    for (const json& t : j.at("trace"))
      r.trace.push_back({t.at(0).get<int>(), t.at(1).get<long>(), num(t.at(2)),
                         num(t.at(3)), num(t.at(4))});
    return rec;
  } catch (const json::exception& e) {
    fail(ErrorClass::Format, file.string() + ": malformed run record: " + e.what());
  }
}

}  // namespace lorank
