#include "alignlab/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "alignlab/errors.hpp"
#include "alignlab/utf8.hpp"

namespace alignlab {

namespace {

bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v' || c == 0x00A0 ||
         c == 0x3000;
}

// ASCII and Latin-1 upper case to lower case.
char32_t fold(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  if (c >= 0x00C0 && c <= 0x00DE && c != 0x00D7) return c + 32;
  return c;
}

std::string format(double v, const char* fmt) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace

std::string Normalizer::apply(std::string_view text) const {
  const auto drop = utf8::decode(punctuation);
  std::u32string out;
  for (char32_t c : utf8::decode(text)) {
    if (strip_whitespace && is_space(c)) continue;
    if (drop.find(c) != std::u32string::npos) continue;
    out.push_back(case_fold ? fold(c) : c);
  }
  return utf8::encode(out);
}

std::string Normalizer::describe() const {
  std::string s = "strip whitespace: ";
  s += strip_whitespace ? "yes" : "no";
  s += "; case fold: ";
  s += case_fold ? "yes" : "no";
  // Double backticks: the default set itself contains one.
  s += "; removed: `` " + punctuation + " ``";
  return s;
}

std::string normalize(std::string_view text) { return Normalizer{}.apply(text); }

double AlignmentCounts::cer() const {
  if (ref_length == 0) throw ScoringError("CER is undefined for an empty reference");
  return static_cast<double>(errors()) / static_cast<double>(ref_length);
}

AlignmentCounts& AlignmentCounts::operator+=(const AlignmentCounts& o) {
  substitutions += o.substitutions;
  insertions += o.insertions;
  deletions += o.deletions;
  ref_length += o.ref_length;
  return *this;
}

std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

AlignmentCounts align(std::u32string_view ref, std::u32string_view hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  const std::size_t w = m + 1;
  std::vector<std::size_t> d((n + 1) * w);
  for (std::size_t i = 0; i <= n; ++i) d[i * w] = i;
  for (std::size_t j = 0; j <= m; ++j) d[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      d[i * w + j] = std::min({d[(i - 1) * w + j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1), d[(i - 1) * w + j] + 1,
                               d[i * w + j - 1] + 1});
    }
  }
  AlignmentCounts c;
  c.ref_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = d[i * w + j];
    if (i > 0 && j > 0) {
      const std::size_t cost = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      if (here == d[(i - 1) * w + j - 1] + cost) {
        c.substitutions += cost;
        --i;
        --j;
        continue;
      }
    }
    if (j > 0 && here == d[i * w + j - 1] + 1) {
      ++c.insertions;
      --j;
      continue;
    }
    ++c.deletions;
    --i;
  }
  return c;
}

CerResult cer(std::string_view ref, std::string_view hyp, const Normalizer& normalizer) {
  const auto r = utf8::decode(normalizer.apply(ref));
  const auto h = utf8::decode(normalizer.apply(hyp));
  if (r.empty()) throw ScoringError("CER is undefined for an empty reference");
  CerResult out;
  out.counts = align(r, h);
  out.value = out.counts.cer();
  return out;
}

ScoreResult score_run(std::span<const Hypothesis> hyps, const Manifest& references, const Normalizer& normalizer) {
  std::map<std::string, const Hypothesis*> by_id;
  for (const auto& h : hyps) {
    if (!by_id.emplace(h.utt_id, &h).second) throw ScoringError("duplicate hypothesis for " + h.utt_id);
  }
  ScoreResult out;
  std::vector<std::string> missing;
  std::set<std::string> ref_ids;
  for (const auto& e : references) {
    ref_ids.insert(e.utt_id);
    auto it = by_id.find(e.utt_id);
    if (it == by_id.end()) {
      missing.push_back(e.utt_id);
      continue;
    }
    const auto r = cer(e.transcript, it->second->text, normalizer);
    out.per_set[std::string(to_string(e.split))] += r.counts;
    out.aggregate += r.counts;
  }
  if (!missing.empty()) {
    std::string list;
    const std::size_t shown = std::min<std::size_t>(missing.size(), 10);
    for (std::size_t k = 0; k < shown; ++k) list += (k ? ", " : "") + missing[k];
    if (missing.size() > shown) list += ", ... (" + std::to_string(missing.size()) + " total)";
    throw ScoringError("no hypothesis for utt_id(s): " + list);
  }
  for (const auto& h : hyps) {
    if (!ref_ids.count(h.utt_id)) out.warnings.push_back("hypothesis for unknown utt_id " + h.utt_id + " ignored");
  }
  return out;
}

void write_counts_tsv(const std::filesystem::path& path, const ScoreResult& score) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << "test_set\tsubstitutions\tinsertions\tdeletions\tref_length\tcer\n";
  auto row = [&f](const std::string& name, const AlignmentCounts& c) {
    f << name << '\t' << c.substitutions << '\t' << c.insertions << '\t' << c.deletions << '\t' << c.ref_length << '\t'
      << format(c.ref_length ? c.cer() : 0.0, "%.6f") << '\n';
  };
  for (const auto& [name, c] : score.per_set) row(name, c);
  row("all", score.aggregate);
}

Report emit_report(std::span<const RunScores> runs, const std::string& title, const std::string& note) {
  if (runs.empty()) throw ReportError("report needs at least one run");
  std::set<std::string> labels;
  for (const auto& r : runs) {
    if (r.label.empty() || r.label.find_first_of("\t\n|") != std::string::npos) {
      throw ReportError("bad run label '" + r.label + "'");
    }
    if (!labels.insert(r.label).second) throw ReportError("duplicate run label " + r.label);
  }
  std::vector<std::string> sets;
  for (const auto& [name, v] : runs.front().cer) sets.push_back(name);
  if (sets.empty()) throw ReportError("run " + runs.front().label + " has no test sets");
  for (const auto& r : runs) {
    std::vector<std::string> other;
    for (const auto& [name, v] : r.cer) {
      if (!(v >= 0.0)) throw ReportError("run " + r.label + " has an invalid CER on " + name);
      other.push_back(name);
    }
    if (other != sets) throw ReportError("run " + r.label + " covers different test sets than " + runs.front().label);
  }

  Report out;
  std::ostringstream md, tsv;
  md << "## " << title << "\n\n";
  if (!note.empty()) md << note << "\n\n";
  md << "| Test set |";
  tsv << "test_set";
  for (const auto& r : runs) {
    md << ' ' << r.label << " |";
    tsv << '\t' << r.label;
  }
  md << "\n|---|";
  for (std::size_t k = 0; k < runs.size(); ++k) md << "---:|";
  md << '\n';
  tsv << '\n';
  for (const auto& set : sets) {
    double best = runs.front().cer.at(set);
    for (const auto& r : runs) best = std::min(best, r.cer.at(set));
    md << "| " << set << " |";
    tsv << set;
    for (const auto& r : runs) {
      const double v = r.cer.at(set);
      const std::string cell = format(100.0 * v, "%.2f");
      md << ' ' << (v == best ? "**" + cell + "**" : cell) << " |";
      tsv << '\t' << format(100.0 * v, "%.4f");
    }
    md << '\n';
    tsv << '\n';
  }
  md << "\nCER% (lower is better); best per row in bold.\n";
  out.markdown = md.str();
  out.tsv = tsv.str();
  return out;
}

std::vector<RunScores> parse_report_tsv(std::string_view tsv) {
  auto split = [](std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    return out;
  };
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < tsv.size()) {
    const auto nl = tsv.find('\n', start);
    const auto end = nl == std::string_view::npos ? tsv.size() : nl;
    if (end > start) lines.push_back(tsv.substr(start, end - start));
    start = end + 1;
  }
  if (lines.empty()) throw ReportError("empty report TSV");
  const auto header = split(lines[0]);
  if (header.size() < 2 || header[0] != "test_set") throw ReportError("report TSV header must start with test_set");
  std::vector<RunScores> runs;
  for (std::size_t k = 1; k < header.size(); ++k) runs.push_back({header[k], {}});
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto cells = split(lines[li]);
    if (cells.size() != header.size()) throw ReportError("report TSV row " + std::to_string(li) + " has wrong width");
    for (std::size_t k = 1; k < cells.size(); ++k) {
      try {
        runs[k - 1].cer[cells[0]] = std::stod(cells[k]) / 100.0;
      } catch (const std::logic_error&) {
        throw ReportError("report TSV cell '" + cells[k] + "' is not a number");
      }
    }
  }
  return runs;
}

}  // namespace alignlab
