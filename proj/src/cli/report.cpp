#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ktrans/cli.hpp"

namespace ktrans::cli {

namespace {

namespace fs = std::filesystem;

std::string num(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string bucket_label(const BucketRow& row) {
  if (!row.high) return ">" + std::to_string(row.low - 1);
  return std::to_string(row.low) + "-" + std::to_string(*row.high);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

std::pair<std::string, fs::path> parse_system_spec(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw UsageError("--system expects NAME=PATH, got '" + spec + "'");
  }
  auto name = spec.substr(0, eq);
  if (name.find_first_of(",\"\n") != std::string::npos) {
    throw UsageError("system name '" + name + "' may not contain commas or quotes");
  }
  return {name, spec.substr(eq + 1)};
}

std::vector<std::size_t> parse_edges(const std::string& text) {
  std::vector<std::size_t> edges;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--buckets expects comma-separated integers, got '" + text + "'");
    }
    edges.push_back(static_cast<std::size_t>(std::stoull(part)));
  }
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw UsageError("--buckets must increase strictly");
  return edges;
}

std::vector<SystemReport> cmd_report(const ReportOptions& o) {
  if (o.systems.empty()) throw UsageError("report needs at least one --system NAME=PATH");
  const auto ref = read_lines(o.ref);
  if (ref.empty()) throw DataError("empty reference file " + o.ref.string());
  std::vector<std::size_t> lengths;
  if (o.src) {
    const auto src = read_lines(*o.src);
    if (src.size() != ref.size()) throw DataError("source and reference line counts differ");
    for (const auto& s : src) lengths.push_back(split_whitespace(s).size());
  } else {
    for (const auto& r : ref) lengths.push_back(split_whitespace(r).size());
  }

  std::vector<SystemReport> out;
  for (const auto& [name, path] : o.systems) {
    const auto hyp = read_lines(path);
    if (hyp.size() != ref.size()) {
      throw DataError("system '" + name + "': " + std::to_string(hyp.size()) +
                      " lines vs " + std::to_string(ref.size()) + " reference lines");
    }
    std::vector<BucketedPair> pairs;
    std::vector<TranslationPair> all;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      pairs.push_back({lengths[i], split_whitespace(hyp[i]), split_whitespace(ref[i])});
      all.push_back({pairs.back().candidate, pairs.back().reference});
    }
    SystemReport rep;
    rep.name = name;
    try {
      rep.buckets = length_bucket_report(pairs, o.edges, o.bleu);
      rep.overall = corpus_bleu(all, o.bleu);
    } catch (const std::invalid_argument& e) {
      throw DataError(e.what());
    }
    out.push_back(std::move(rep));
  }

  if (!o.out.empty()) {
    if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
    auto with = [&](const std::string& suffix) {
      auto p = o.out;
      p += suffix;
      return p;
    };
    write_lines(with(".csv"), {report_csv(out, o.bleu.n_max)});
    write_lines(with("_summary.csv"), {report_summary_csv(out, o.dataset)});
    write_lines(with(".svg"), {report_svg(out)});
  }
  return out;
}

std::string report_csv(const std::vector<SystemReport>& systems, std::size_t n_max) {
  std::string out;
  bool header = true;
  for (const auto& s : systems) {
    std::istringstream lines(bucket_report_csv(s.buckets, n_max));
    std::string line;
    bool first = true;
    while (std::getline(lines, line)) {
      if (first) {
        first = false;
        if (!header) continue;
        header = false;
        out += "system," + line + "\n";
        continue;
      }
      out += s.name + "," + line + "\n";
    }
  }
  if (!out.empty()) out.pop_back();  // write_lines adds the final newline
  return out;
}

std::string report_summary_csv(const std::vector<SystemReport>& systems, const std::string& dataset) {
  std::string out = "model," + dataset;
  for (const auto& s : systems) out += "\n" + s.name + "," + num(s.overall.score * 100.0, 2);
  return out;
}

std::string report_svg(const std::vector<SystemReport>& systems) {
  static const char* palette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"};
  const std::size_t groups = systems.empty() ? 0 : systems.front().buckets.size();
  const double bar_w = 18.0, gap = 24.0, left = 60.0, top = 40.0, plot_h = 240.0;
  const double group_w = bar_w * static_cast<double>(systems.size()) + gap;
  const double width = left + group_w * static_cast<double>(groups) + 20.0;
  const double height = top + plot_h + 70.0;

  double max_score = 0.0;
  for (const auto& s : systems)
    for (const auto& b : s.buckets)
      if (b.report) max_score = std::max(max_score, b.report->score * 100.0);
  const double y_max = std::max(10.0, std::ceil(max_score / 10.0) * 10.0);

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width, 0) << "\" height=\""
      << num(height, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << num(width / 2, 1) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
      << "BLEU by source sentence length</text>\n";
  for (int tick = 0; tick <= 5; ++tick) {
    const double v = y_max * tick / 5.0;
    const double y = top + plot_h - plot_h * tick / 5.0;
    svg << "<line x1=\"" << num(left, 1) << "\" y1=\"" << num(y, 1) << "\" x2=\"" << num(width - 20, 1)
        << "\" y2=\"" << num(y, 1) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << num(left - 6, 1) << "\" y=\"" << num(y + 4, 1)
        << "\" text-anchor=\"end\">" << num(v, 0) << "</text>\n";
  }
  for (std::size_t g = 0; g < groups; ++g) {
    const double gx = left + gap / 2 + group_w * static_cast<double>(g);
    for (std::size_t s = 0; s < systems.size(); ++s) {
      const auto& b = systems[s].buckets[g];
      if (!b.report) continue;
      const double h = plot_h * (b.report->score * 100.0) / y_max;
      svg << "<rect x=\"" << num(gx + bar_w * static_cast<double>(s), 1) << "\" y=\""
          << num(top + plot_h - h, 1) << "\" width=\"" << num(bar_w - 2, 1) << "\" height=\""
          << num(h, 1) << "\" fill=\"" << palette[s % 6] << "\"><title>"
          << xml_escape(systems[s].name) << " " << xml_escape(bucket_label(b)) << ": "
          << num(b.report->score * 100.0, 2) << "</title></rect>\n";
    }
    const auto& row = systems.front().buckets[g];
    const double cx = gx + bar_w * static_cast<double>(systems.size()) / 2;
    svg << "<text x=\"" << num(cx, 1) << "\" y=\"" << num(top + plot_h + 16, 1)
        << "\" text-anchor=\"middle\">" << xml_escape(bucket_label(row)) << "</text>\n";
    svg << "<text x=\"" << num(cx, 1) << "\" y=\"" << num(top + plot_h + 30, 1)
        << "\" text-anchor=\"middle\" fill=\"#666666\">n=" << row.pair_count << "</text>\n";
  }
  svg << "<line x1=\"" << num(left, 1) << "\" y1=\"" << num(top + plot_h, 1) << "\" x2=\""
      << num(width - 20, 1) << "\" y2=\"" << num(top + plot_h, 1) << "\" stroke=\"black\"/>\n";
  for (std::size_t s = 0; s < systems.size(); ++s) {
    const double lx = left + 110.0 * static_cast<double>(s);
    const double ly = top + plot_h + 48;
    svg << "<rect x=\"" << num(lx, 1) << "\" y=\"" << num(ly, 1) << "\" width=\"10\" height=\"10\" fill=\""
        << palette[s % 6] << "\"/>\n";
    svg << "<text x=\"" << num(lx + 14, 1) << "\" y=\"" << num(ly + 9, 1) << "\">"
        << xml_escape(systems[s].name) << "</text>\n";
  }
  svg << "</svg>";
  return svg.str();
}

}  // namespace ktrans::cli
