#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/rng.hpp"

using namespace neuronscope;

namespace {
std::string temp_path(const std::string& name) {
  return "/tmp/nscorpus_test_" + std::to_string(::getpid()) + "_" + name;
}

SynthLanguageSpec spec_a() { return {"synthA", 52, 103, 0, 52, 0.2, 0.7, 11}; }
}  // namespace

TEST_CASE("ingest caps token count") {
  const std::string path = temp_path("big.txt");
  {
    std::ofstream f(path);
    for (int i = 0; i < 2000; ++i) f << "paragraph number " << i << " with words\n\n";
  }
  const Corpus c = ingest_corpus(path, "en", 1000, 42);
  CHECK(c.size() == 1000);
  CHECK(c.language == "en");
  for (int32_t t : c.tokens) {
    CHECK(t >= 0);
    CHECK(t < kByteVocab);
  }
  std::remove(path.c_str());
}

TEST_CASE("ingest rejects empty input") {
  const std::string path = temp_path("empty.txt");
  { std::ofstream f(path); }
  CHECK_THROWS_AS(ingest_corpus(path, "en", 1000, 42), ArtifactError);
  {
    std::ofstream f(path);
    f << "\n\n  \n\n";
  }
  CHECK_THROWS_AS(ingest_corpus(path, "en", 1000, 42), ArtifactError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(ingest_corpus(temp_path("missing.txt"), "en", 10, 1), ArtifactError);
}

TEST_CASE("ingest is deterministic and shuffles paragraphs") {
  const std::string path = temp_path("shuf.txt");
  {
    std::ofstream f(path);
    for (int i = 0; i < 50; ++i) f << "unit " << i << "\n\n";
  }
  const Corpus a = ingest_text(read_file(path), "en", 100000, 7, path);
  const Corpus b = ingest_text(read_file(path), "en", 100000, 7, path);
  CHECK(a.tokens == b.tokens);

  const Corpus c = ingest_corpus(path, "en", 100000, 8);
  CHECK(a.tokens != c.tokens);  // different seed, different order
  // Same bytes as a multiset (shuffle preserves content).
  std::multiset<int32_t> ma(a.tokens.begin(), a.tokens.end());
  std::multiset<int32_t> mc(c.tokens.begin(), c.tokens.end());
  CHECK(ma == mc);
  std::remove(path.c_str());
}

TEST_CASE("synthesis respects range partition") {
  SynthLanguageSpec s = spec_a();
  s.overlap_fraction = 0.0;
  const Corpus c = synthesize_corpus(s, 5000);
  for (int32_t t : c.tokens) {
    CHECK(t >= s.private_lo);
    CHECK(t < s.private_hi);
  }
  s.overlap_fraction = 1.0;
  const Corpus sh = synthesize_corpus(s, 5000);
  for (int32_t t : sh.tokens) {
    CHECK(t >= s.shared_lo);
    CHECK(t < s.shared_hi);
  }
}

TEST_CASE("synthesis is deterministic in (spec, seed)") {
  const Corpus a = synthesize_corpus(spec_a(), 4000);
  const Corpus b = synthesize_corpus(spec_a(), 4000);
  CHECK(a.tokens == b.tokens);
  SynthLanguageSpec other = spec_a();
  other.seed = 12;
  CHECK(synthesize_corpus(other, 4000).tokens != a.tokens);
}

TEST_CASE("synthesis validates spec") {
  SynthLanguageSpec s = spec_a();
  s.private_hi = s.private_lo;  // empty private range
  s.overlap_fraction = 0.5;
  CHECK_THROWS_AS(synthesize_corpus(s, 100), UsageError);
  s = spec_a();
  s.bigram_temperature = 0.0;
  CHECK_THROWS_AS(synthesize_corpus(s, 100), UsageError);
  s = spec_a();
  s.overlap_fraction = 1.5;
  CHECK_THROWS_AS(synthesize_corpus(s, 100), UsageError);
}

TEST_CASE("languages with overlap 0 have disjoint supports") {
  std::vector<SynthLanguageSpec> specs = {
      {"a", 52, 103, 0, 52, 0.0, 0.7, 1},
      {"b", 103, 154, 0, 52, 0.0, 0.7, 2},
      {"c", 154, 205, 0, 52, 0.0, 0.7, 3},
  };
  std::vector<std::set<int32_t>> supports;
  for (const auto& s : specs) {
    const Corpus c = synthesize_corpus(s, 3000);
    supports.emplace_back(c.tokens.begin(), c.tokens.end());
  }
  for (size_t i = 0; i < supports.size(); ++i) {
    for (size_t j = i + 1; j < supports.size(); ++j) {
      std::vector<int32_t> inter;
      std::set_intersection(supports[i].begin(), supports[i].end(), supports[j].begin(),
                            supports[j].end(), std::back_inserter(inter));
      CHECK(inter.empty());
    }
  }
}

TEST_CASE("window math") {
  Corpus c;
  c.language = "x";
  c.tokens.assign(1050, 1);
  const auto w = windows_of(c, 512);
  CHECK(w.size() == 2);
  CHECK(w[0].cols == 512);
  // Exact partition: windows * t_max + dropped == total, dropped < t_max.
  CHECK(1050 - w.size() * 512 == 26);

  c.tokens.assign(511, 1);
  CHECK_THROWS_AS(windows_of(c, 512), UsageError);
  CHECK_THROWS_AS(batch_sequences(c, 512, 4), UsageError);
}

TEST_CASE("batching covers all windows") {
  Corpus c;
  c.language = "x";
  c.tokens.resize(2048);
  for (size_t i = 0; i < c.tokens.size(); ++i) c.tokens[i] = static_cast<int32_t>(i % 97);
  const auto batches = batch_sequences(c, 512, 4);
  CHECK(batches.size() == 1);
  CHECK(batches[0].rows == 4);
  CHECK(batches[0].cols == 512);
  // Hand-enumerated windows: contiguous non-overlapping spans in order.
  for (int r = 0; r < 4; ++r) {
    for (int t = 0; t < 512; ++t) {
      CHECK(batches[0].row(r)[t] == c.tokens[static_cast<size_t>(r) * 512 + t]);
    }
  }
}

TEST_CASE("window partition is exact over random sizes") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int t_max = static_cast<int>(rng.range(2, 64));
    const size_t total = static_cast<size_t>(rng.range(t_max, 4000));
    Corpus c;
    c.language = "x";
    c.tokens.assign(total, 3);
    const size_t n = window_count(c, t_max);
    const size_t dropped = total - n * static_cast<size_t>(t_max);
    CHECK(dropped < static_cast<size_t>(t_max));
    CHECK(n * t_max + dropped == total);
  }
}

TEST_CASE("shuffled batching is a permutation of windows") {
  Corpus c;
  c.language = "x";
  c.tokens.resize(40 * 8);
  for (size_t i = 0; i < c.tokens.size(); ++i) c.tokens[i] = static_cast<int32_t>(i % 251);
  const auto plain = batch_sequences(c, 8, 4);
  const auto shuffled = batch_sequences(c, 8, 4, uint64_t{9});
  const auto shuffled2 = batch_sequences(c, 8, 4, uint64_t{9});

  auto window_multiset = [](const std::vector<TokenBatch>& bs) {
    std::multiset<std::vector<int32_t>> out;
    for (const auto& b : bs) {
      for (int r = 0; r < b.rows; ++r) {
        out.emplace(b.row(r), b.row(r) + b.cols);
      }
    }
    return out;
  };
  CHECK(window_multiset(plain) == window_multiset(shuffled));
  CHECK(window_multiset(shuffled) == window_multiset(shuffled2));
}

TEST_CASE("corpus file round-trip") {
  const Corpus a = synthesize_corpus(spec_a(), 1234);
  const std::string path = temp_path("rt.corpus");
  save_corpus(a, path);
  const Corpus b = load_corpus(path);
  CHECK(b.language == a.language);
  CHECK(b.tokens == a.tokens);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_corpus(path), ArtifactError);
}
