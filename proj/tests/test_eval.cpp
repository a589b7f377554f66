#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "alignlab/errors.hpp"
#include "alignlab/eval.hpp"

using namespace alignlab;

namespace {

// Exponential-time reference: plain recursion over the three edit choices.
std::size_t brute_distance(std::u32string_view a, std::u32string_view b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::size_t sub = brute_distance(a.substr(1), b.substr(1)) + (a[0] == b[0] ? 0 : 1);
  const std::size_t del = brute_distance(a.substr(1), b) + 1;
  const std::size_t ins = brute_distance(a, b.substr(1)) + 1;
  return std::min({sub, del, ins});
}

std::u32string random_string(std::mt19937_64& rng, std::size_t max_len, std::size_t alphabet) {
  std::u32string s(uniform_below(rng, max_len + 1), U'a');
  for (auto& c : s) c = static_cast<char32_t>(U'a' + uniform_below(rng, alphabet));
  return s;
}

}  // namespace

TEST_CASE("normalize examples") {
  CHECK(normalize("a, b") == "ab");
  CHECK(normalize("AB") == "ab");
  CHECK(normalize("  He said: \"Hi!\"  ") == "hesaidhi");
  CHECK(normalize("ÀÉ，ok。") == "àéok");
  for (const char* s : {"a, b", "Hello World!", "x.y-z", "ÀÉ，ok。", ""}) CHECK(normalize(normalize(s)) == normalize(s));
  Normalizer keep_case;
  keep_case.case_fold = false;
  CHECK(keep_case.apply("A b") == "Ab");
}

TEST_CASE("cer examples") {
  const auto same = cer("hello", "hello");
  CHECK(same.value == 0.0);
  const auto sub = cer("abc", "axc");
  CHECK(sub.counts.substitutions == 1);
  CHECK(sub.counts.insertions == 0);
  CHECK(sub.counts.deletions == 0);
  CHECK(sub.value == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto del = cer("abcd", "");
  CHECK(del.counts.deletions == 4);
  CHECK(del.value == 1.0);
  const auto ins = cer("ab", "abxy");
  CHECK(ins.counts.insertions == 2);
  CHECK(ins.value == 1.0);
  CHECK_THROWS_AS(cer("", "abc"), ScoringError);
  CHECK_THROWS_AS(cer(" ,", "abc"), ScoringError);
  // Normalization is applied before alignment.
  CHECK(cer("A, B", "ab").value == 0.0);
}

TEST_CASE("traceback prefers substitution over insertion over deletion") {
  // "ab" -> "ba": distance 2, realizable as 2 substitutions or as insert+delete.
  const auto c = align(U"ab", U"ba");
  CHECK(c.errors() == 2);
  CHECK(c.substitutions == 2);
  // "a" -> "bc": one substitution and one insertion, never a deletion.
  const auto d = align(U"a", U"bc");
  CHECK(d.substitutions == 1);
  CHECK(d.insertions == 1);
  CHECK(d.deletions == 0);
}

TEST_CASE("DP distance matches brute-force recursion on 500 random pairs") {
  std::mt19937_64 rng(77);
  for (int k = 0; k < 500; ++k) {
    const auto a = random_string(rng, 6, 3);
    const auto b = random_string(rng, 6, 3);
    const std::size_t oracle = brute_distance(a, b);
    REQUIRE(edit_distance(a, b) == oracle);
    const auto counts = align(a, b);
    REQUIRE(counts.errors() == oracle);
    REQUIRE(counts.ref_length >= counts.substitutions + counts.deletions);
    REQUIRE(counts.ref_length == a.size());
    REQUIRE(b.size() == a.size() - counts.deletions + counts.insertions);
  }
}

TEST_CASE("edit distance is a metric") {
  std::mt19937_64 rng(78);
  for (int k = 0; k < 300; ++k) {
    const auto a = random_string(rng, 6, 3);
    const auto b = random_string(rng, 6, 3);
    const auto c = random_string(rng, 6, 3);
    CHECK(edit_distance(a, b) == edit_distance(b, a));
    CHECK((edit_distance(a, b) == 0) == (a == b));
    CHECK(edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c));
  }
}

TEST_CASE("score_run micro-averages per test set") {
  const Manifest refs{{"u1", "a", 1, 1, Split::test_clean}, {"u2", "abc", 2, 1, Split::test_clean}};
  const std::vector<Hypothesis> hyps{{"u1", "a"}, {"u2", ""}};
  const auto r = score_run(hyps, refs);
  CHECK(r.per_set.at("test_clean").cer() == 0.75);
  CHECK(r.aggregate.cer() == 0.75);
  // The unweighted mean of per-utterance CERs would be 0.5.
  const double mean = (cer("a", "a").value + cer("abc", "").value) / 2.0;
  CHECK(mean == 0.5);
  CHECK(mean != r.aggregate.cer());
}

TEST_CASE("micro and unweighted mean agree when references share a length") {
  const Manifest refs{{"u1", "ab", 1, 1, Split::test_clean}, {"u2", "cd", 2, 1, Split::test_clean}};
  const std::vector<Hypothesis> hyps{{"u1", "ab"}, {"u2", "xx"}};
  const auto r = score_run(hyps, refs);
  CHECK(r.aggregate.cer() == (cer("ab", "ab").value + cer("cd", "xx").value) / 2.0);
}

TEST_CASE("score_run coverage errors and additivity") {
  const Manifest refs{{"c1", "abc", 1, 1, Split::test_clean},
                      {"n1", "abcd", 1, 1, Split::test_noisy},
                      {"a1", "ab", 1, 1, Split::test_accent}};
  CHECK_THROWS_AS(score_run(std::vector<Hypothesis>{}, refs), ScoringError);
  try {
    score_run(std::vector<Hypothesis>{{"c1", "abc"}}, refs);
    FAIL("expected ScoringError");
  } catch (const ScoringError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("n1") != std::string::npos);
    CHECK(msg.find("a1") != std::string::npos);
  }
  const std::vector<Hypothesis> hyps{{"c1", "abd"}, {"n1", "ab"}, {"a1", "abz"}, {"zz", "extra"}};
  const auto r = score_run(hyps, refs);
  CHECK(r.warnings.size() == 1);
  AlignmentCounts sum;
  for (const auto& [name, c] : r.per_set) sum += c;
  CHECK(sum.substitutions == r.aggregate.substitutions);
  CHECK(sum.insertions == r.aggregate.insertions);
  CHECK(sum.deletions == r.aggregate.deletions);
  CHECK(sum.ref_length == r.aggregate.ref_length);
  CHECK(r.aggregate.ref_length == 9);
}

TEST_CASE("report: single run, dominance, round trip") {
  const std::vector<RunScores> one{{"staged", {{"test_clean", 0.01}, {"test_noisy", 0.2}}}};
  const auto single = emit_report(one, "Single");
  CHECK(single.markdown.find("| Test set | staged |") != std::string::npos);
  CHECK(single.markdown.find("**1.00**") != std::string::npos);

  const std::vector<RunScores> two{{"transformer", {{"test_accent", 0.05}, {"test_clean", 0.01}, {"test_noisy", 0.2}}},
                                   {"qformer", {{"test_accent", 0.08}, {"test_clean", 0.03}, {"test_noisy", 0.25}}}};
  const auto rep = emit_report(two, "Projectors");
  CHECK(rep.markdown.find("**5.00**") != std::string::npos);
  CHECK(rep.markdown.find("**1.00**") != std::string::npos);
  CHECK(rep.markdown.find("**20.00**") != std::string::npos);
  CHECK(rep.markdown.find("**8.00**") == std::string::npos);
  CHECK(rep.markdown.find("**3.00**") == std::string::npos);

  const auto parsed = parse_report_tsv(rep.tsv);
  CHECK(emit_report(parsed, "Projectors").tsv == rep.tsv);
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[1].label == "qformer");
  CHECK(parsed[1].cer.at("test_noisy") == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(emit_report(two, "Projectors").tsv == rep.tsv);
}

TEST_CASE("report errors") {
  CHECK_THROWS_AS(emit_report(std::vector<RunScores>{}, "x"), ReportError);
  const std::vector<RunScores> mismatched{{"a", {{"test_clean", 0.1}}}, {"b", {{"test_noisy", 0.1}}}};
  CHECK_THROWS_AS(emit_report(mismatched, "x"), ReportError);
  const std::vector<RunScores> dup{{"a", {{"test_clean", 0.1}}}, {"a", {{"test_clean", 0.1}}}};
  CHECK_THROWS_AS(emit_report(dup, "x"), ReportError);
}

TEST_CASE("counts file") {
  const Manifest refs{{"u1", "a", 1, 1, Split::test_clean}, {"u2", "abc", 2, 1, Split::test_clean}};
  const std::vector<Hypothesis> hyps{{"u1", "a"}, {"u2", ""}};
  const auto path = std::filesystem::temp_directory_path() / "alignlab_counts.tsv";
  write_counts_tsv(path, score_run(hyps, refs));
  std::ifstream f(path);
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(row == "test_clean\t0\t0\t3\t4\t0.750000");
  std::filesystem::remove(path);
}
