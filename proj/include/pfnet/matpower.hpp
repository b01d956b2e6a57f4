#pragma once

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pfnet/error.hpp"
#include "pfnet/grid.hpp"

namespace pfnet {

namespace detail {

constexpr const char* kCanonicalMarker = "% pfnet canonical case v1";
constexpr double kPi = 3.14159265358979323846;

struct Matrix {
  std::vector<std::vector<double>> rows;
  std::vector<int> row_lines;  // source line of each row, for diagnostics
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Scans a MATPOWER-style file into named numeric matrices and scalars.
// Comments (%) and fields we do not model (version strings, gencost, names)
// are tolerated and skipped.
class CaseScanner {
 public:
  explicit CaseScanner(const std::string& text) : text_(text) {}

  void scan() {
    std::istringstream in(text_);
    std::string raw;
    int line_no = 0;
    std::string pending_name;  // assignment target awaiting its '[' block
    bool in_matrix = false;
    bool in_string_block = false;  // bracketed non-numeric block, e.g. bus_name
    while (std::getline(in, raw)) {
      ++line_no;
      std::string line = strip_comment(raw);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

      if (!in_matrix && !in_string_block) {
        std::string name, rhs;
        if (match_assignment(line, name, rhs)) {
          if (name == "function") {
            auto eq = line.find('=');
            if (eq != std::string::npos) {
              fname_ = line.substr(eq + 1);
              auto a = fname_.find_first_not_of(" \t\r");
              auto b = fname_.find_last_not_of(" \t\r;");
              fname_ = a == std::string::npos ? "" : fname_.substr(a, b - a + 1);
            }
            continue;
          }
          if (rhs.empty() || rhs[0] != '[') {
            // scalar or string assignment
            if (!rhs.empty() && (std::isdigit(static_cast<unsigned char>(rhs[0])) || rhs[0] == '-' || rhs[0] == '.')) {
              char* end = nullptr;
              scalars_[name] = std::strtod(rhs.c_str(), &end);
            }
            continue;
          }
          pending_name = name;
          rhs.erase(0, 1);  // drop '['
          if (is_string_matrix(name)) {
            in_string_block = rhs.find(']') == std::string::npos;
            continue;
          }
          matrices_[pending_name] = Matrix{};
          in_matrix = !consume_rows(matrices_[pending_name], rhs, line_no);
          continue;
        }
        continue;
      }
      if (in_string_block) {
        if (line.find(']') != std::string::npos) in_string_block = false;
        continue;
      }
      in_matrix = !consume_rows(matrices_[pending_name], line, line_no);
    }
    if (in_matrix) throw ParseError("matrix '" + pending_name + "' is not closed with ']'", line_no);
  }

  bool has_matrix(const std::string& name) const { return matrices_.count(name) != 0; }
  const Matrix& matrix(const std::string& name) const {
    auto it = matrices_.find(name);
    if (it == matrices_.end()) throw ParseError("missing required matrix 'mpc." + name + "'", 0);
    return it->second;
  }
  bool has_scalar(const std::string& name) const { return scalars_.count(name) != 0; }
  double scalar(const std::string& name) const {
    auto it = scalars_.find(name);
    if (it == scalars_.end()) throw ParseError("missing required scalar 'mpc." + name + "'", 0);
    return it->second;
  }
  const std::string& function_name() const { return fname_; }

 private:
  static std::string strip_comment(const std::string& s) {
    auto pos = s.find('%');
    return pos == std::string::npos ? s : s.substr(0, pos);
  }

  static bool is_string_matrix(const std::string& name) { return name == "bus_name" || name == "branch_name"; }

  // Recognizes "mpc.<name> = <rhs>" and "function <...>".
  static bool match_assignment(const std::string& line, std::string& name, std::string& rhs) {
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) return false;
    if (line.compare(first, 9, "function ") == 0) {
      name = "function";
      return true;
    }
    if (line.compare(first, 4, "mpc.") != 0) return false;
    auto eq = line.find('=', first);
    if (eq == std::string::npos) return false;
    name = line.substr(first + 4, eq - first - 4);
    while (!name.empty() && (name.back() == ' ' || name.back() == '\t')) name.pop_back();
    rhs = line.substr(eq + 1);
    auto r0 = rhs.find_first_not_of(" \t");
    rhs = r0 == std::string::npos ? "" : rhs.substr(r0);
    return true;
  }

  // Appends the numbers on one physical line to the matrix; ';' ends a row,
  // ']' ends the matrix. Returns true when the matrix was closed.
  bool consume_rows(Matrix& m, const std::string& line, int line_no) {
    std::vector<double> row;
    auto flush = [&]() {
      if (!row.empty()) {
        m.rows.push_back(row);
        m.row_lines.push_back(line_no);
        row.clear();
      }
    };
    const char* p = line.c_str();
    while (*p) {
      if (*p == ';' ) {
        flush();
        ++p;
      } else if (*p == ']') {
        flush();
        return true;
      } else if (*p == ',' || std::isspace(static_cast<unsigned char>(*p))) {
        ++p;
      } else {
        char* end = nullptr;
        double v = std::strtod(p, &end);
        if (end == p) throw ParseError(std::string("unexpected token '") + *p + "' in matrix data", line_no);
        row.push_back(v);
        p = end;
      }
    }
    // A newline also terminates a row in MATLAB matrix syntax.
    flush();
    return false;
  }

  const std::string& text_;
  std::string fname_;
  std::unordered_map<std::string, Matrix> matrices_;
  std::unordered_map<std::string, double> scalars_;
};

inline const std::vector<double>& require_cols(const Matrix& m, std::size_t i, std::size_t n_cols,
                                               const char* what) {
  const auto& row = m.rows[i];
  if (row.size() < n_cols)
    throw ParseError(std::string(what) + " row has " + std::to_string(row.size()) + " columns, expected at least " +
                         std::to_string(n_cols),
                     m.row_lines[i]);
  return row;
}

}  // namespace detail

// Parses the MATPOWER case subset (baseMVA, bus, gen, branch). Loads and
// generation are converted to per-unit on the system base and angles to
// radians. Files produced by serialize_case() carry a marker making them
// already per-unit; those parse without unit conversion.
inline GridCase parse_matpower(const std::string& text) {
  const bool canonical = text.compare(0, std::string(detail::kCanonicalMarker).size(), detail::kCanonicalMarker) == 0;
  detail::CaseScanner sc(text);
  sc.scan();

  GridCase c;
  c.name = sc.function_name();
  if (c.name.rfind("mpc", 0) == 0) c.name.clear();  // "function mpc = name" keeps rhs only
  c.base_mva = sc.scalar("baseMVA");
  if (!(c.base_mva > 0.0)) throw ParseError("baseMVA must be positive", 0);
  const double p_scale = canonical ? 1.0 : 1.0 / c.base_mva;
  const double ang_scale = canonical ? 1.0 : detail::kPi / 180.0;

  const auto& bus = sc.matrix("bus");
  std::unordered_map<int, int> index_of;
  for (std::size_t i = 0; i < bus.rows.size(); ++i) {
    const auto& r = detail::require_cols(bus, i, 10, "bus");
    Bus b;
    b.id = static_cast<int>(r[0]);
    const int type = static_cast<int>(r[1]);
    if (type < 1 || type > 3) throw ParseError("bus " + std::to_string(b.id) + ": unsupported bus type " +
                                               std::to_string(type), bus.row_lines[i]);
    b.kind = static_cast<BusKind>(type);
    b.p_demand = r[2] * p_scale;
    b.q_demand = r[3] * p_scale;
    b.vm = r[7];
    b.va = r[8] * ang_scale;
    b.base_kv = r[9];
    if (index_of.count(b.id))
      throw ParseError("duplicate bus id " + std::to_string(b.id), bus.row_lines[i]);
    index_of[b.id] = static_cast<int>(c.buses.size());
    c.buses.push_back(b);
  }

  auto resolve = [&](double id_field, const detail::Matrix& m, std::size_t i, const char* what) {
    const int id = static_cast<int>(id_field);
    auto it = index_of.find(id);
    if (it == index_of.end())
      throw ParseError(std::string(what) + " references unknown bus " + std::to_string(id), m.row_lines[i]);
    return it->second;
  };

  if (sc.has_matrix("gen")) {
    const auto& gen = sc.matrix("gen");
    for (std::size_t i = 0; i < gen.rows.size(); ++i) {
      const auto& r = detail::require_cols(gen, i, 6, "gen");
      if (r.size() >= 8 && r[7] <= 0) continue;  // out of service
      Generator g;
      g.bus = resolve(r[0], gen, i, "generator");
      g.p_set = r[1] * p_scale;
      g.vm_set = r[5];
      c.gens.push_back(g);
    }
  }

  const auto& branch = sc.matrix("branch");
  for (std::size_t i = 0; i < branch.rows.size(); ++i) {
    const auto& r = detail::require_cols(branch, i, 10, "branch");
    if (r.size() >= 11 && r[10] <= 0) continue;  // out of service
    Branch br;
    br.from_bus = resolve(r[0], branch, i, "branch");
    br.to_bus = resolve(r[1], branch, i, "branch");
    br.r = r[2];
    br.x = r[3];
    br.b_charging = r[4];
    br.tap = r[8] == 0.0 ? 1.0 : r[8];
    br.shift = r[9] * ang_scale;
    c.branches.push_back(br);
  }

  validate(c);
  return c;
}

inline GridCase load_case(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open case file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  GridCase c = parse_matpower(ss.str());
  if (c.name.empty()) {
    auto slash = path.find_last_of("/\\");
    c.name = slash == std::string::npos ? path : path.substr(slash + 1);
    auto dot = c.name.find_last_of('.');
    if (dot != std::string::npos) c.name = c.name.substr(0, dot);
  }
  return c;
}

// Canonical line-oriented serialization: the same bus/gen/branch matrices as
// the MATPOWER format but with all quantities in the internal units (per-unit,
// radians) and full double precision, so parse(serialize(c)) == c field-wise.
inline std::string serialize_case(const GridCase& c) {
  using detail::format_double;
  std::ostringstream out;
  out << detail::kCanonicalMarker << " (per-unit, radians)\n";
  out << "function mpc = " << (c.name.empty() ? "pfnet_case" : c.name) << "\n";
  out << "mpc.baseMVA = " << format_double(c.base_mva) << ";\n";
  out << "mpc.bus = [\n";
  for (const auto& b : c.buses) {
    out << "\t" << b.id << "\t" << static_cast<int>(b.kind) << "\t" << format_double(b.p_demand) << "\t"
        << format_double(b.q_demand) << "\t0\t0\t1\t" << format_double(b.vm) << "\t" << format_double(b.va) << "\t"
        << format_double(b.base_kv) << "\t1\t0\t0;\n";
  }
  out << "];\n";
  out << "mpc.gen = [\n";
  for (const auto& g : c.gens) {
    out << "\t" << c.buses[g.bus].id << "\t" << format_double(g.p_set) << "\t0\t0\t0\t" << format_double(g.vm_set)
        << "\t" << format_double(c.base_mva) << "\t1\t0\t0;\n";
  }
  out << "];\n";
  out << "mpc.branch = [\n";
  for (const auto& br : c.branches) {
    out << "\t" << c.buses[br.from_bus].id << "\t" << c.buses[br.to_bus].id << "\t" << format_double(br.r) << "\t"
        << format_double(br.x) << "\t" << format_double(br.b_charging) << "\t0\t0\t0\t" << format_double(br.tap)
        << "\t" << format_double(br.shift) << "\t1;\n";
  }
  out << "];\n";
  return out.str();
}

}  // namespace pfnet
