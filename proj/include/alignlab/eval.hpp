#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "alignlab/data.hpp"
#include "alignlab/pipeline.hpp"

namespace alignlab {

struct Normalizer {
  bool strip_whitespace = true;
  bool case_fold = true;
  // UTF-8 set of characters removed before alignment.
  std::string punctuation = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~、。，！？：；";

  std::string apply(std::string_view text) const;
  std::string describe() const;
};

// Default normalization; idempotent.
std::string normalize(std::string_view text);

struct AlignmentCounts {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t ref_length = 0;

  std::size_t errors() const { return substitutions + insertions + deletions; }
  // Throws ScoringError when ref_length is zero.
  double cer() const;
  AlignmentCounts& operator+=(const AlignmentCounts& o);
};

// Levenshtein distance with unit costs, two rolling rows of min length.
std::size_t edit_distance(std::u32string_view a, std::u32string_view b);

// Minimal-edit alignment counts. Traceback prefers substitution (or match),
// then insertion, then deletion.
AlignmentCounts align(std::u32string_view ref, std::u32string_view hyp);

struct CerResult {
  AlignmentCounts counts;
  double value = 0.0;
};

// Normalizes both sides, then aligns. Empty normalized reference is a ScoringError.
CerResult cer(std::string_view ref, std::string_view hyp, const Normalizer& normalizer = {});

struct ScoreResult {
  // Keyed by split name.
  std::map<std::string, AlignmentCounts> per_set;
  AlignmentCounts aggregate;
  std::vector<std::string> warnings;
};

// Micro-averaged scoring of hypotheses against manifest references. Every
// manifest entry needs a hypothesis; hypotheses without a reference only warn.
ScoreResult score_run(std::span<const Hypothesis> hyps, const Manifest& references, const Normalizer& normalizer = {});

void write_counts_tsv(const std::filesystem::path& path, const ScoreResult& score);

// One system configuration's CER (as a fraction) per test set.
struct RunScores {
  std::string label;
  std::map<std::string, double> cer;
};

struct Report {
  std::string markdown;
  std::string tsv;
};

// Rows are test sets, columns are runs. Cells are CER%; the lowest value
// of each row is bolded in markdown (ties all bolded). TSV cells use %.4f.
Report emit_report(std::span<const RunScores> runs, const std::string& title, const std::string& note = {});
// Inverse of the TSV half of emit_report; cells come back as fractions.
std::vector<RunScores> parse_report_tsv(std::string_view tsv);

}  // namespace alignlab
