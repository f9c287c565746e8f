#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "beard/binio.hpp"
#include "beard/data.hpp"
#include "beard/wav.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

using namespace beard;
namespace fs = std::filesystem;

namespace {

std::vector<ManifestEntry> labeled_entries(int n) {
  std::vector<ManifestEntry> out;
  for (int i = 0; i < n; ++i)
    out.push_back({"u" + std::to_string(i), "wav/u" + std::to_string(i) + ".wav", 1.0 + i, "a b", 10.0});
  return out;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

double power_db_ratio(const std::vector<double>& s, const std::vector<double>& n) {
  double ps = 0, pn = 0;
  for (double x : s) ps += x * x;
  for (double x : n) pn += x * x;
  return 10.0 * std::log10(ps / pn);
}

}  // namespace

TEST_CASE("manifest loading") {
  test::TempDir dir("manifest");

  SUBCASE("empty file gives an empty list") {
    write(dir.path() / "m.jsonl", "");
    CHECK(load_manifest(dir.path() / "m.jsonl").empty());
  }

  SUBCASE("valid lines keep file order") {
    write(dir.path() / "m.jsonl",
          "{\"id\":\"c\",\"audio_path\":\"c.wav\",\"duration_s\":1.5}\n"
          "{\"id\":\"a\",\"audio_path\":\"a.wav\",\"duration_s\":2,\"transcript\":\"x y\",\"snr_db\":12.5}\n"
          "\n"
          "{\"id\":\"b\",\"audio_path\":\"b.wav\",\"duration_s\":0.5}\n");
    const auto e = load_manifest(dir.path() / "m.jsonl");
    REQUIRE(e.size() == 3);
    CHECK(e[0].id == "c");
    CHECK(e[1].id == "a");
    CHECK(e[2].id == "b");
    CHECK(e[1].transcript == std::optional<std::string>("x y"));
    CHECK(e[1].snr_db == std::optional<double>(12.5));
    CHECK_FALSE(e[0].transcript.has_value());
  }

  SUBCASE("missing audio_path names the line") {
    write(dir.path() / "m.jsonl",
          "{\"id\":\"a\",\"audio_path\":\"a.wav\",\"duration_s\":1}\n{\"id\":\"b\",\"duration_s\":1}\n");
    try {
      load_manifest(dir.path() / "m.jsonl");
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
      CHECK(std::string(e.what()).find("audio_path") != std::string::npos);
    }
  }

  SUBCASE("malformed JSON and duplicate ids are rejected") {
    CHECK_THROWS_AS(parse_manifest("{\"id\":\"a\",\n"), DataError);
    CHECK_THROWS_AS(parse_manifest("{\"id\":\"a\",\"audio_path\":\"a\",\"duration_s\":1}\n"
                                   "{\"id\":\"a\",\"audio_path\":\"b\",\"duration_s\":1}\n"),
                    DataError);
    CHECK_THROWS_AS(parse_manifest("{\"id\":\"a\",\"audio_path\":\"a\",\"duration_s\":0}\n"), DataError);
  }

  SUBCASE("missing file is a data error") { CHECK_THROWS_AS(load_manifest(dir.path() / "nope.jsonl"), DataError); }
}

TEST_CASE("manifest round trip is exact") {
  auto entries = labeled_entries(5);
  entries[2].transcript.reset();
  entries[3].snr_db = -7.123456789012345;
  const std::string text = serialize_manifest(entries);
  CHECK(parse_manifest(text) == entries);
  CHECK(serialize_manifest(parse_manifest(text)) == text);
}

TEST_CASE("split validation") {
  auto entries = labeled_entries(3);
  CHECK_NOTHROW(validate_split(entries, true));
  CHECK_THROWS_AS(validate_split(entries, false), DataError);
  entries[1].transcript.reset();
  CHECK_THROWS_AS(validate_split(entries, true), DataError);
}

TEST_CASE("folds") {
  SUBCASE("8 entries, k=4 gives folds of two") {
    const auto plan = make_folds(labeled_entries(8), 4, 1);
    for (int f = 0; f < 4; ++f) CHECK(plan.fold_members(f).size() == 2);
  }

  SUBCASE("10 entries, k=4 gives sizes {3,3,2,2}") {
    const auto plan = make_folds(labeled_entries(10), 4, 3);
    std::vector<std::size_t> sizes;
    for (int f = 0; f < 4; ++f) sizes.push_back(plan.fold_members(f).size());
    std::sort(sizes.rbegin(), sizes.rend());
    CHECK(sizes == std::vector<std::size_t>{3, 3, 2, 2});
  }

  SUBCASE("balanced partition for every size and k") {
    for (int n = 2; n <= 23; ++n)
      for (int k = 2; k <= std::min(n, 6); ++k) {
        const auto entries = labeled_entries(n);
        const auto plan = make_folds(entries, k, static_cast<std::uint64_t>(n * 31 + k));
        std::set<std::string> seen;
        std::size_t lo = entries.size(), hi = 0;
        for (int f = 0; f < k; ++f) {
          const auto members = plan.fold_members(f);
          lo = std::min(lo, members.size());
          hi = std::max(hi, members.size());
          for (const auto& id : members) CHECK(seen.insert(id).second);
        }
        CHECK(seen.size() == entries.size());
        CHECK(hi - lo <= 1);
        CHECK(plan.assignments.size() == entries.size());
      }
  }

  SUBCASE("deterministic per seed") {
    const auto entries = labeled_entries(12);
    CHECK(make_folds(entries, 4, 9).assignments == make_folds(entries, 4, 9).assignments);
    CHECK(make_folds(entries, 4, 9).assignments != make_folds(entries, 4, 10).assignments);
  }

  SUBCASE("k larger than the labeled count is rejected") {
    CHECK_THROWS_AS(make_folds(labeled_entries(3), 4, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_folds(labeled_entries(3), 1, 0), std::invalid_argument);
  }

  SUBCASE("fold roles partition the labeled set") {
    const auto entries = labeled_entries(16);
    const auto plan = make_folds(entries, 4, 2);
    for (int f = 0; f < 4; ++f) {
      const auto s = split_for_fold(entries, plan, f, 0.2);
      CHECK(s.test.size() == 4);
      CHECK(s.val.size() >= 1);
      CHECK(s.train.size() >= 1);
      CHECK(s.train.size() + s.val.size() + s.test.size() == entries.size());
      for (const auto& e : s.test) CHECK(plan.assignments.at(e.id) == f);
      for (const auto& e : s.train) CHECK(plan.assignments.at(e.id) != f);
    }
  }
}

TEST_CASE("synthetic corpus") {
  SUBCASE("single-token single-utterance case") {
    test::TempDir dir("corpus1");
    SyntheticSpec spec;
    spec.vocab = {"a"};
    spec.utterance_count = 1;
    spec.snr_low_db = spec.snr_high_db = 40.0;
    const auto paths = generate_synthetic_corpus(spec, dir.path());
    const auto labeled = load_manifest(paths.labeled);
    REQUIRE(labeled.size() == 1);
    CHECK(labeled[0].transcript == std::optional<std::string>("a"));
    CHECK(labeled[0].snr_db == std::optional<double>(40.0));
    CHECK(load_manifest(paths.unlabeled).empty());
    CHECK(fs::exists(resolve_audio(paths.labeled, labeled[0])));
    std::size_t wavs = 0;
    for ([[maybe_unused]] const auto& f : fs::directory_iterator(dir.path() / "wav")) ++wavs;
    CHECK(wavs == 1);
  }

  SUBCASE("fixed seed gives bit-identical WAV bytes") {
    test::TempDir a("corpusA"), b("corpusB");
    SyntheticSpec spec;
    spec.vocab = {"x", "y", "z"};
    spec.utterance_count = 3;
    spec.unlabeled_count = 2;
    spec.snr_low_db = -10;
    spec.seed = 77;
    spec.max_tokens = 3;
    generate_synthetic_corpus(spec, a.path());
    generate_synthetic_corpus(spec, b.path());
    for (const auto& f : fs::directory_iterator(a.path() / "wav"))
      CHECK(binio::read_file(f.path().string()) == binio::read_file((b.path() / "wav" / f.path().filename()).string()));
    CHECK(binio::read_file((a.path() / "labeled.jsonl").string()) ==
          binio::read_file((b.path() / "labeled.jsonl").string()));
  }

  SUBCASE("recorded SNR matches the measured power ratio") {
    test::TempDir dir("corpusSNR");
    SyntheticSpec spec;
    spec.vocab = {"a", "b", "c", "d"};
    spec.utterance_count = 20;
    spec.snr_low_db = -10;
    spec.snr_high_db = 40;
    spec.seed = 5;
    spec.max_tokens = 4;
    const auto paths = generate_synthetic_corpus(spec, dir.path());
    const auto entries = load_manifest(paths.labeled);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto u = synthesize_utterance(spec, i);
      CHECK(std::abs(power_db_ratio(u.clean, u.noise) - *entries[i].snr_db) < 0.5);
      // Also from the stored 16-bit audio: noise = stored mixture - clean.
      const auto w = read_wav(resolve_audio(paths.labeled, entries[i]));
      REQUIRE(w.samples.size() == u.clean.size());
      std::vector<double> residual(w.samples.size());
      for (std::size_t t = 0; t < residual.size(); ++t) residual[t] = w.samples[t] - u.clean[t];
      CHECK(std::abs(power_db_ratio(u.clean, residual) - *entries[i].snr_db) < 0.5);
      CHECK(*entries[i].snr_db >= -10.0);
      CHECK(*entries[i].snr_db <= 40.0);
    }
  }

  SUBCASE("token frequencies are injective") {
    for (std::size_t v : {1u, 2u, 8u, 30u, 200u}) {
      std::set<double> freqs;
      for (std::size_t i = 0; i < v; ++i) {
        const double f = token_frequency(i, v);
        CHECK(f < 8000.0);
        if (i > 0) CHECK(f > token_frequency(i - 1, v));
        freqs.insert(f);
      }
      CHECK(freqs.size() == v);
    }
  }

  SUBCASE("unwritable directory is an error") {
    test::TempDir dir("corpusRO");
    write(dir.path() / "file", "x");
    SyntheticSpec spec;
    spec.vocab = {"a"};
    CHECK_THROWS(generate_synthetic_corpus(spec, dir.path() / "file" / "sub"));
  }
}

TEST_CASE("wav round trip") {
  Waveform w;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(std::sin(i * 0.01) * 0.9);
  const auto bytes = encode_wav(w);
  const auto back = decode_wav(bytes);
  REQUIRE(back.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(std::abs(back.samples[i] - w.samples[i]) <= 0.5 / 32768.0 + 1e-12);
  CHECK(encode_wav(back) == bytes);
  CHECK_THROWS(decode_wav(std::vector<char>(bytes.begin(), bytes.begin() + 20)));
}

TEST_CASE("tokenizer") {
  const Tokenizer tok({"alpha", "bravo"});
  CHECK(tok.size() == 5);
  CHECK(tok.encode("bravo alpha") == std::vector<int>{4, 3});
  CHECK(tok.decode({1, 4, 3, 2, 0}) == "bravo alpha");
  CHECK(tok.covers("alpha alpha"));
  CHECK_FALSE(tok.covers("charlie"));
  CHECK_THROWS_AS(tok.encode("charlie"), DataError);
}

TEST_CASE("feature loading is independent of thread count") {
  test::TempDir dir("feats");
  SyntheticSpec spec;
  spec.vocab = {"a", "b"};
  spec.utterance_count = 6;
  spec.seed = 8;
  const auto paths = generate_synthetic_corpus(spec, dir.path());
  const auto entries = load_manifest(paths.labeled);
  const auto one = load_features(paths.labeled, entries, {}, 1);
  const auto four = load_features(paths.labeled, entries, {}, 4);
  REQUIRE(one.size() == entries.size());
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(test::bitwise_equal(one[i].frames, four[i].frames));
}
