#pragma once

// File formats: trajectory CSV, COLVAR-style tables, coordinate frames, CSV dumps and JSON files.

#include <genspec/deeploss.hpp>
#include <genspec/dynamics.hpp>
#include <genspec/errors.hpp>
#include <genspec/types.hpp>

#include <nlohmann/json.hpp>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace genspec::io {

namespace detail {

inline std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view tok, const std::string& where) {
  std::string s(tok);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE) throw IoError("cannot parse number '" + s + "' " + where);
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  if (sep == ' ') {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
      if (j > i) out.push_back(line.substr(i, j - i));
      i = j;
    }
    return out;
  }
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      std::string_view tok = line.substr(start, i - start);
      while (!tok.empty() && (tok.back() == '\r' || tok.back() == ' ')) tok.remove_suffix(1);
      while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
      out.push_back(tok);
      start = i + 1;
    }
  }
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Trajectory CSV: "# d=<d> beta=<b> dt=<dt> seed=<seed>" then "step,time,x0,...,x{d-1},bias".

inline void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
  auto out = detail::open_out(path);
  const Index d = traj.dim();
  out << "# d=" << d << " beta=" << detail::fmt17(traj.meta.beta) << " dt=" << detail::fmt17(traj.meta.dt)
      << " seed=" << traj.meta.seed << "\n";
  out << "step,time";
  for (Index k = 0; k < d; ++k) out << ",x" << k;
  out << ",bias\n";
  std::string line;
  for (Index i = 0; i < traj.size(); ++i) {
    line = std::to_string(traj.steps[static_cast<std::size_t>(i)]);
    line += ',';
    line += detail::fmt17(traj.times[i]);
    for (Index k = 0; k < d; ++k) {
      line += ',';
      line += detail::fmt17(traj.states(i, k));
    }
    line += ',';
    line += detail::fmt17(traj.bias_values[i]);
    line += '\n';
    out << line;
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline Trajectory read_trajectory_csv(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  Trajectory traj;
  Index d = -1;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw IoError(path.string() + ": missing metadata header");
  for (auto tok : detail::split(std::string_view(line).substr(2), ' ')) {
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) continue;
    const auto key = tok.substr(0, eq);
    const auto val = tok.substr(eq + 1);
    if (key == "d") d = static_cast<Index>(detail::parse_double(val, "in header"));
    if (key == "beta") traj.meta.beta = detail::parse_double(val, "in header");
    if (key == "dt") traj.meta.dt = detail::parse_double(val, "in header");
    if (key == "seed") traj.meta.seed = std::stoull(std::string(val));
  }
  if (d < 1) throw IoError(path.string() + ": header lacks d");
  if (!std::getline(in, line)) throw IoError(path.string() + ": missing column header");
  if (static_cast<Index>(detail::split(line, ',').size()) != d + 3) throw IoError(path.string() + ": column count does not match d");
  std::vector<double> states;
  std::vector<double> times;
  std::vector<double> bias;
  Index row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto toks = detail::split(line, ',');
    const std::string where = "at data row " + std::to_string(row + 1) + " of " + path.string();
    if (static_cast<Index>(toks.size()) != d + 3) throw IoError("wrong field count " + where);
    traj.steps.push_back(std::stoll(std::string(toks[0])));
    times.push_back(detail::parse_double(toks[1], where));
    for (Index k = 0; k < d; ++k) states.push_back(detail::parse_double(toks[static_cast<std::size_t>(2 + k)], where));
    bias.push_back(detail::parse_double(toks[static_cast<std::size_t>(2 + d)], where));
    ++row;
  }
  traj.states = Eigen::Map<const RowMatrix>(states.data(), row, d);
  traj.times = Eigen::Map<const Vector>(times.data(), row);
  traj.bias_values = Eigen::Map<const Vector>(bias.data(), row);
  traj.validate();
  return traj;
}

/**
 * Whitespace-separated table with a header line naming the columns; a PLUMED-style
 * "#! FIELDS a b c" header is accepted and other "#" lines are skipped. Missing `bias_column`
 * means zero bias; missing `time_column` means times 1, 2, ... scaled by `dt`.
 */
inline Trajectory read_colvar(const std::filesystem::path& path, const std::vector<std::string>& state_columns,
                              const std::string& time_column, const std::string& bias_column, double beta, double dt) {
  auto in = detail::open_in(path);
  std::string line;
  std::vector<std::string> names;
  while (names.empty() && std::getline(in, line)) {
    if (line.rfind("#! FIELDS", 0) == 0) {
      for (auto t : detail::split(std::string_view(line).substr(9), ' ')) names.emplace_back(t);
    } else if (!line.empty() && line[0] != '#') {
      for (auto t : detail::split(line, ' ')) names.emplace_back(t);
    }
  }
  if (names.empty()) throw IoError(path.string() + ": no header naming the columns");
  auto index_of = [&](const std::string& name) -> Index {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<Index>(i);
    }
    return -1;
  };
  std::vector<Index> cols;
  if (state_columns.empty()) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] != time_column && names[i] != bias_column) cols.push_back(static_cast<Index>(i));
    }
  } else {
    for (const auto& c : state_columns) {
      const Index i = index_of(c);
      if (i < 0) throw IoError(path.string() + ": no column named " + c);
      cols.push_back(i);
    }
  }
  const Index tcol = time_column.empty() ? -1 : index_of(time_column);
  const Index bcol = bias_column.empty() ? -1 : index_of(bias_column);
  if (!bias_column.empty() && bcol < 0) throw IoError(path.string() + ": no column named " + bias_column);
  const Index d = static_cast<Index>(cols.size());
  if (d < 1) throw IoError(path.string() + ": no state columns");
  std::vector<double> states;
  std::vector<double> times;
  std::vector<double> bias;
  Trajectory traj;
  Index row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto toks = detail::split(line, ' ');
    if (toks.empty()) continue;
    const std::string where = "at data row " + std::to_string(row + 1) + " of " + path.string();
    if (toks.size() != names.size()) throw IoError("wrong field count " + where);
    for (Index c : cols) states.push_back(detail::parse_double(toks[static_cast<std::size_t>(c)], where));
    times.push_back(tcol >= 0 ? detail::parse_double(toks[static_cast<std::size_t>(tcol)], where)
                              : static_cast<double>(row + 1) * dt);
    bias.push_back(bcol >= 0 ? detail::parse_double(toks[static_cast<std::size_t>(bcol)], where) : 0.0);
    traj.steps.push_back(row + 1);
    ++row;
  }
  traj.states = Eigen::Map<const RowMatrix>(states.data(), row, d);
  traj.times = Eigen::Map<const Vector>(times.data(), row);
  traj.bias_values = Eigen::Map<const Vector>(bias.data(), row);
  traj.meta.beta = beta;
  traj.meta.dt = dt;
  traj.validate();
  return traj;
}

/// Numeric table with comma or whitespace separators; lines starting with '#' are skipped.
inline RowMatrix read_matrix(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  std::vector<double> vals;
  Index cols = -1;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const char sep = line.find(',') != std::string::npos ? ',' : ' ';
    const auto toks = detail::split(line, sep);
    if (toks.empty()) continue;
    if (cols < 0) cols = static_cast<Index>(toks.size());
    const std::string where = "at row " + std::to_string(rows + 1) + " of " + path.string();
    if (static_cast<Index>(toks.size()) != cols) throw IoError("ragged row " + where);
    for (auto t : toks) vals.push_back(detail::parse_double(t, where));
    ++rows;
  }
  if (rows == 0) throw IoError(path.string() + ": no data rows");
  return Eigen::Map<const RowMatrix>(vals.data(), rows, cols);
}

/// Coordinate frames: one flat row of 3k coordinates per frame.
inline RowMatrix read_frames(const std::filesystem::path& path) {
  RowMatrix frames = read_matrix(path);
  if (frames.cols() % 3 != 0) throw IoError(path.string() + ": frame width is not a multiple of 3");
  return frames;
}

/// Columns named in `header`, values at 17 significant digits.
inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header, const Matrix& data) {
  if (static_cast<Index>(header.size()) != data.cols()) throw ConfigError("CSV header does not match column count");
  auto out = detail::open_out(path);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  std::string line;
  for (Index r = 0; r < data.rows(); ++r) {
    line.clear();
    for (Index c = 0; c < data.cols(); ++c) {
      if (c) line += ',';
      line += detail::fmt17(data(r, c));
    }
    line += '\n';
    out << line;
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_history_csv(const std::filesystem::path& path, const TrainHistory& h) {
  const std::size_t m = h.lambdas.empty() ? 0 : static_cast<std::size_t>(h.lambdas.front().size());
  std::vector<std::string> header{"step", "loss", "validation_loss"};
  for (std::size_t i = 0; i < m; ++i) header.push_back("lambda" + std::to_string(i));
  Matrix data(static_cast<Index>(h.step.size()), static_cast<Index>(header.size()));
  for (std::size_t r = 0; r < h.step.size(); ++r) {
    const auto ri = static_cast<Index>(r);
    data(ri, 0) = static_cast<double>(h.step[r]);
    data(ri, 1) = h.loss[r];
    data(ri, 2) = h.validation_loss[r];
    for (std::size_t i = 0; i < m; ++i) data(ri, static_cast<Index>(3 + i)) = h.lambdas[r][static_cast<Index>(i)];
  }
  write_csv(path, header, data);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  auto out = detail::open_out(path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace genspec::io
