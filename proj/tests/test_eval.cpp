#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "beard/eval.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

using namespace beard;

namespace {

using Words = std::vector<std::string>;

// Plain two-row Levenshtein distance.
std::size_t levenshtein(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Words random_words(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len, int vocab) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> word(0, vocab - 1);
  Words w(len(rng));
  for (auto& s : w) s = "w" + std::to_string(word(rng));
  return w;
}

}  // namespace

TEST_CASE("wer examples") {
  const auto same = wer({"a", "b"}, {"a", "b"});
  CHECK(same.errors() == 0);
  CHECK(same.wer() == 0.0);

  const auto sub = wer_text("a b c", "a x c");
  CHECK(sub.substitutions == 1);
  CHECK(sub.deletions == 0);
  CHECK(sub.insertions == 0);
  CHECK(sub.wer() == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const auto del = wer_text("a b c", "a c");
  CHECK(del.deletions == 1);
  CHECK(del.errors() == 1);

  const auto ins = wer_text("a", "a b c d");
  CHECK(ins.insertions == 3);
  CHECK(ins.wer() == 3.0);  // insertions can push WER past 1

  // Equal cost: substitution is preferred over an insertion/deletion pair.
  const auto tie = wer_text("a b", "b c");
  CHECK(tie.errors() == 2);
  CHECK(tie.substitutions == 2);

  CHECK_THROWS_AS(wer({}, {"a"}), std::invalid_argument);
  CHECK_THROWS_AS(wer_text(" .,", "a"), std::invalid_argument);
}

TEST_CASE("wer counts match an independent edit distance") {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 500; ++i) {
    const auto ref = random_words(rng, 1, 20, 6);
    const auto hyp = random_words(rng, 0, 20, 6);
    const auto r = wer(ref, hyp);
    REQUIRE(r.errors() == levenshtein(ref, hyp));
    CHECK(r.reference_words == ref.size());
    // Counts describe a real alignment: hyp length = N - D + I.
    CHECK(hyp.size() == ref.size() - r.deletions + r.insertions);
  }
}

TEST_CASE("edit distance is a metric") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 300; ++i) {
    const auto a = random_words(rng, 1, 10, 4), b = random_words(rng, 1, 10, 4), c = random_words(rng, 1, 10, 4);
    const auto ab = wer(a, b).errors(), bc = wer(b, c).errors(), ac = wer(a, c).errors();
    CHECK(ac <= ab + bc);
    CHECK(ab == wer(b, a).errors());
    CHECK(wer(a, a).errors() == 0);
  }
}

TEST_CASE("normalization") {
  CHECK(normalize_words("  Hello,  WORLD!\tfoo ") == Words{"hello", "world", "foo"});
  const auto a = wer_text("Climb Flight Level", "climb flight level.");
  CHECK(a.errors() == 0);
  CHECK(wer_text("A B C", "a x c").errors() == wer_text("a b c", "A X C").errors());
  NormalizationRules keep_case;
  keep_case.lowercase = false;
  CHECK(wer_text("A", "a", keep_case).errors() == 1);
}

TEST_CASE("matched pair test conventions") {
  std::vector<SegmentPair> equal;
  for (int i = 0; i < 5; ++i) equal.push_back({"s" + std::to_string(i), i, i});
  const auto z0 = matched_pair_test(equal);
  CHECK(z0.z == 0.0);
  CHECK(z0.p_value == 1.0);
  CHECK_FALSE(z0.significant);

  std::vector<SegmentPair> constant;
  for (int i = 0; i < 4; ++i) constant.push_back({"s" + std::to_string(i), 2, 1});
  const auto zc = matched_pair_test(constant);
  CHECK(zc.p_value == 0.0);
  CHECK(zc.significant);
  CHECK(zc.z == std::numeric_limits<double>::infinity());

  CHECK_THROWS_AS(matched_pair_test({{"x", 1, 0}}), std::invalid_argument);
  CHECK_THROWS_AS(matched_pair_test({}), std::invalid_argument);
}

TEST_CASE("matched pair test arithmetic and antisymmetry") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<long> errs(0, 6);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<SegmentPair> pairs, swapped;
    for (int i = 0; i < 100; ++i) {
      const long a = errs(rng), b = errs(rng);
      pairs.push_back({"s" + std::to_string(i), a, b});
      swapped.push_back({"s" + std::to_string(i), b, a});
    }
    // Spreadsheet-style recomputation.
    double sum = 0.0;
    for (const auto& p : pairs) sum += static_cast<double>(p.errors_a - p.errors_b);
    const double mean = sum / 100.0;
    double ss = 0.0;
    for (const auto& p : pairs) ss += std::pow(static_cast<double>(p.errors_a - p.errors_b) - mean, 2);
    const double sd = std::sqrt(ss / 99.0);
    const double z = mean / (sd / 10.0);
    const double p = std::erfc(std::abs(z) / std::sqrt(2.0));

    const auto r = matched_pair_test(pairs);
    const auto s = matched_pair_test(swapped);
    CHECK(std::abs(r.z - z) <= 1e-9);
    CHECK(std::abs(r.p_value - p) <= 1e-9);
    CHECK(r.mean_difference == doctest::Approx(mean).epsilon(1e-12));
    CHECK(r.segments == 100);
    CHECK(r.significant == (r.p_value < 0.001));
    CHECK(s.z == -r.z);
    CHECK(s.p_value == r.p_value);
  }
}

TEST_CASE("snr bins") {
  const auto bins = default_snr_bins();
  REQUIRE(bins.size() == 5);
  CHECK(bins.front().low == -10.0);
  CHECK(bins.back().high == 40.0);
  CHECK(bins.back().contains(40.0));
  CHECK_FALSE(bins[0].contains(0.0));

  SUBCASE("empty bins are undefined, not zero") {
    const auto rep = snr_binned_wer({{15.0, wer_text("a b", "a")}});
    CHECK_FALSE(rep.bins[0].wer().has_value());
    CHECK(rep.bins[0].result.reference_words == 0);
    REQUIRE(rep.bins[2].wer().has_value());
    CHECK(*rep.bins[2].wer() == 0.5);
  }

  SUBCASE("membership matches a brute-force interval check") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> snr(-20.0, 50.0);
    std::uniform_int_distribution<int> edge(-1, 4);
    std::vector<std::pair<double, WERResult>> entries;
    WERResult corpus;
    for (int i = 0; i < 400; ++i) {
      // Mix in exact bin edges.
      const double s = i % 5 == 0 ? 10.0 * edge(rng) : snr(rng);
      WERResult w;
      w.reference_words = 1 + static_cast<std::size_t>(i % 4);
      w.substitutions = static_cast<std::size_t>(i % 3);
      entries.emplace_back(s, w);
      corpus += w;
    }
    const auto rep = snr_binned_wer(entries);
    std::vector<WERResult> expect(5);
    std::vector<std::size_t> counts(5, 0);
    WERResult other;
    std::size_t other_count = 0;
    for (const auto& [s, w] : entries) {
      int hit = -1;
      for (int b = 0; b < 5; ++b) {
        const double lo = -10.0 + 10.0 * b, hi = lo + 10.0;
        if (s >= lo && (s < hi || (b == 4 && s <= hi))) hit = b;
      }
      if (hit < 0) {
        other += w;
        ++other_count;
      } else {
        expect[hit] += w;
        ++counts[hit];
      }
    }
    WERResult total = rep.other.result;
    for (int b = 0; b < 5; ++b) {
      CHECK(rep.bins[b].utterances == counts[b]);
      CHECK(rep.bins[b].result.errors() == expect[b].errors());
      CHECK(rep.bins[b].result.reference_words == expect[b].reference_words);
      total += rep.bins[b].result;
    }
    CHECK(rep.other.utterances == other_count);
    CHECK(rep.other.result.reference_words == other.reference_words);
    CHECK(total.errors() == corpus.errors());
    CHECK(total.reference_words == corpus.reference_words);
  }

  SUBCASE("one bin holding everything equals the corpus wer") {
    std::vector<std::pair<double, WERResult>> entries{{12.0, wer_text("a b c", "a")}, {18.5, wer_text("x y", "x y z")}};
    WERResult corpus = entries[0].second;
    corpus += entries[1].second;
    const auto rep = snr_binned_wer(entries);
    CHECK(*rep.bins[2].wer() == corpus.wer());
  }
}

TEST_CASE("fold aggregation pools counts") {
  const auto one = wer_text("a b c", "a c d");
  const auto single = aggregate_folds({one});
  CHECK(single.pooled.errors() == one.errors());
  CHECK(single.pooled.wer() == one.wer());
  CHECK(single.folds.size() == 1);

  const auto zero = wer_text("a b", "a b"), full = wer_text("a b", "c d");
  CHECK(aggregate_folds({zero, full}).pooled.wer() == 0.5);
  CHECK_THROWS(aggregate_folds({}));

  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<WERResult> folds;
    std::vector<std::pair<Words, Words>> all;
    for (int f = 0; f < 4; ++f) {
      WERResult fold;
      for (int u = 0; u < 5; ++u) {
        auto ref = random_words(rng, 1, 8, 5), hyp = random_words(rng, 0, 8, 5);
        fold += wer(ref, hyp);
        all.emplace_back(ref, hyp);
      }
      folds.push_back(fold);
    }
    std::size_t errors = 0, words = 0;
    for (const auto& [r, h] : all) {
      errors += levenshtein(r, h);
      words += r.size();
    }
    CHECK(aggregate_folds(folds).pooled.wer() == static_cast<double>(errors) / static_cast<double>(words));
  }
}

TEST_CASE("jsonl text files") {
  test::TempDir dir("texts");
  const std::vector<std::pair<std::string, std::string>> rows{{"u1", "climb flight level"}, {"u0", "hold \"short\""}};
  save_texts(dir.path() / "t.jsonl", rows);
  CHECK(load_texts(dir.path() / "t.jsonl") == rows);
  CHECK_THROWS(load_texts(dir.path() / "missing.jsonl"));
  std::ofstream(dir.path() / "bad.jsonl") << "{\"id\": \"a\"}\n";
  CHECK_THROWS(load_texts(dir.path() / "bad.jsonl"));
}
