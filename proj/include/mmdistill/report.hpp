#pragma once
// CSV (RFC 4180), markdown table, plain-text summary, and minimal SVG
// line-chart output for evaluation reports and sweeps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmdistill/common.hpp"
#include "mmdistill/eval.hpp"

namespace mmd {

// 17 significant digits: doubles round-trip exactly through the CSV
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& field) {
  bool needs = field.find_first_of(",\"\r\n") != std::string::npos;
  if (!needs) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  return out + "\"";
}

inline void write_csv(const std::filesystem::path& path,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  check(out.good(), "write_csv: cannot open " + path.string());
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << csv_quote(row[i]);
    }
    out << "\r\n";
  }
}

// RFC 4180 parser (quoted fields, doubled quotes, CRLF or LF)
inline std::vector<std::vector<std::string>> parse_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "parse_csv: cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), {});
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
    } else {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---- eval report writers ----

struct SeedRow {
  std::string method, arch;
  int seed = 0;
  double accuracy = 0.0;
};

inline void write_per_seed_csv(const std::filesystem::path& path,
                               const std::vector<SeedRow>& rows) {
  std::vector<std::vector<std::string>> out{{"method", "arch", "seed", "accuracy"}};
  for (const auto& r : rows)
    out.push_back({r.method, r.arch, std::to_string(r.seed), fmt_double(r.accuracy)});
  write_csv(path, out);
}

struct AggregateRow {
  std::string method, arch;
  double mean = 0.0, stdev = 0.0;
};

inline void write_aggregate_csv(const std::filesystem::path& path,
                                const std::vector<AggregateRow>& rows) {
  std::vector<std::vector<std::string>> out{{"method", "arch", "mean", "std"}};
  for (const auto& r : rows)
    out.push_back({r.method, r.arch, fmt_double(r.mean), fmt_double(r.stdev)});
  write_csv(path, out);
}

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
  return buf;
}

inline void write_summary_text(const std::filesystem::path& path, const std::string& method,
                               const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "write_summary_text: cannot open " + path.string());
  out << "method: " << method << "\n";
  for (const auto& r : report.rows) {
    out << "  " << r.name << ": " << pct(r.mean) << " +/- " << pct(r.stdev) << " (";
    for (std::size_t i = 0; i < r.accuracies.size(); ++i) {
      if (i) out << ", ";
      out << pct(r.accuracies[i]);
    }
    out << ")\n";
  }
}

// methods x datasets markdown table with "mean+/-std" cells
inline void write_markdown_table(const std::filesystem::path& path,
                                 const std::vector<std::string>& datasets,
                                 const std::vector<std::string>& methods,
                                 const std::vector<std::vector<std::string>>& cells) {
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "write_markdown_table: cannot open " + path.string());
  out << "| method |";
  for (const auto& d : datasets) out << " " << d << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < datasets.size(); ++i) out << "---|";
  out << "\n";
  for (std::size_t m = 0; m < methods.size(); ++m) {
    out << "| " << methods[m] << " |";
    for (std::size_t d = 0; d < datasets.size(); ++d) out << " " << cells[m][d] << " |";
    out << "\n";
  }
}

// ---- minimal static SVG line chart ----

struct ChartSeries {
  std::string label;
  std::vector<double> values;
};

inline void write_svg_chart(const std::filesystem::path& path,
                            const std::vector<ChartSeries>& series, const std::string& title) {
  const int w = 860, h = 420, ml = 60, mr = 180, mt = 40, mb = 40;
  double ymin = 1e300, ymax = -1e300;
  std::size_t n = 1;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (ymax == ymin) ymax = ymin + 1;
  static const char* colors[] = {"#c0392b", "#2980b9", "#27ae60", "#8e44ad",
                                 "#d35400", "#16a085", "#7f8c8d", "#2c3e50"};
  std::ofstream out(path, std::ios::trunc);
  check(out.good(), "write_svg_chart: cannot open " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << ml << "\" y=\"24\" font-family=\"monospace\" font-size=\"15\">"
      << title << "</text>\n";
  int pw = w - ml - mr, ph = h - mt - mb;
  out << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#999\"/>\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", ymax);
  out << "<text x=\"4\" y=\"" << mt + 12 << "\" font-family=\"monospace\" font-size=\"12\">"
      << buf << "</text>\n";
  std::snprintf(buf, sizeof(buf), "%.4g", ymin);
  out << "<text x=\"4\" y=\"" << mt + ph << "\" font-family=\"monospace\" font-size=\"12\">"
      << buf << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    if (s.values.empty()) continue;
    out << "<polyline fill=\"none\" stroke=\"" << colors[si % 8]
        << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      double x = ml + (n > 1 ? static_cast<double>(i) * pw / (n - 1) : 0.0);
      double y = mt + ph - (s.values[i] - ymin) / (ymax - ymin) * ph;
      out << x << "," << y << " ";
    }
    out << "\"/>\n";
    out << "<text x=\"" << w - mr + 8 << "\" y=\"" << mt + 14 + 16 * si
        << "\" font-family=\"monospace\" font-size=\"12\" fill=\"" << colors[si % 8] << "\">"
        << s.label << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace mmd
