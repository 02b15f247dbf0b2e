#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/intervene.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/rng.hpp"
#include "neuronscope/stats.hpp"

using namespace neuronscope;

namespace {
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.d_ff = 12;
  cfg.n_heads = 2;
  cfg.vocab_size = kVocabSize;
  cfg.t_max = 16;
  cfg.seed = 4;
  return cfg;
}

struct Fixture {
  Model model;
  std::vector<Corpus> corpora;
  StatsTable stats;

  Fixture() : model(Model::init(tiny_config())) {
    std::vector<SynthLanguageSpec> specs = {
        {"a", 52, 103, 0, 52, 0.2, 0.7, 1},
        {"b", 103, 154, 0, 52, 0.2, 0.7, 2},
    };
    for (const auto& s : specs) corpora.push_back(synthesize_corpus(s, 20 * 16));
    stats = collect_stats(model, corpora, {5, 10, 25, 75, 90, 95}, 1);
  }

  NeuronSet some_set(const LanguageCode& lang) const {
    NeuronSet s;
    s.language = lang;
    s.method = IdentifyMethod::Lape;
    s.neurons = {{1, 2}, {1, 7}, {2, 3}, {2, 11}};
    return s;
  }
};
}  // namespace

TEST_CASE("zero source resolves to all-zero values") {
  const Fixture fx;
  const InterventionSpec spec =
      make_intervention(fx.some_set("a"), SubstitutionSource::zero(), fx.stats);
  REQUIRE(spec.values.size() == 4);
  for (double v : spec.values) CHECK(v == 0.0);
}

TEST_CASE("mean source resolves the recorded means") {
  const Fixture fx;
  const NeuronSet set = fx.some_set("a");
  const InterventionSpec spec = make_intervention(set, SubstitutionSource::mean(), fx.stats);
  for (size_t i = 0; i < set.neurons.size(); ++i) {
    CHECK(spec.values[i] == fx.stats.at("a", set.neurons[i]).mean);
  }
}

TEST_CASE("percentile source matches the sort oracle") {
  const Fixture fx;
  const NeuronSet set = fx.some_set("b");
  const InterventionSpec spec = make_intervention(set, SubstitutionSource::pct(90), fx.stats);

  // Oracle: recompute the per-window means from a fresh tap stream and sort.
  const auto windows = windows_of(fx.corpora[1], fx.model.config.t_max);
  for (size_t i = 0; i < set.neurons.size(); ++i) {
    const NeuronId n = set.neurons[i];
    std::vector<double> means;
    for (const auto& w : windows) {
      ForwardOptions opts;
      opts.want_tap = true;
      const ForwardResult fr = fx.model.forward(w, opts);
      means.push_back(fr.tap.layers[static_cast<size_t>(n.layer - 1)].col(n.index - 1).mean());
    }
    std::sort(means.begin(), means.end());
    const size_t k = static_cast<size_t>(std::ceil(0.9 * static_cast<double>(means.size())));
    CHECK(spec.values[i] == doctest::Approx(means[k - 1]).epsilon(1e-12));
  }
}

TEST_CASE("missing percentile is an artifact error") {
  const Fixture fx;
  CHECK_THROWS_AS(make_intervention(fx.some_set("a"), SubstitutionSource::pct(42), fx.stats),
                  ArtifactError);
  NeuronSet wrong = fx.some_set("zz");
  CHECK_THROWS_AS(make_intervention(wrong, SubstitutionSource::mean(), fx.stats),
                  ArtifactError);
}

TEST_CASE("substitution labels round-trip") {
  for (const std::string s : {"mean", "p90", "p5", "zero", "identity"}) {
    CHECK(SubstitutionSource::from_label(s).label() == s);
  }
  CHECK_THROWS_AS(SubstitutionSource::from_label("p"), UsageError);
  CHECK_THROWS_AS(SubstitutionSource::from_label("bogus"), UsageError);
}

TEST_CASE("empty sets give the zero matrix") {
  const Fixture fx;
  std::map<LanguageCode, NeuronSet> sets;
  for (const auto& c : fx.corpora) {
    NeuronSet s;
    s.language = c.language;
    sets[c.language] = s;
  }
  std::map<LanguageCode, Corpus> corpora;
  for (const auto& c : fx.corpora) corpora[c.language] = c;
  const PpxcMatrix m = ppxc_matrix(fx.model, sets, corpora, 8 * 16, 1);
  for (const auto& row : m.entries) {
    for (double v : row) CHECK(v == 0.0);
  }
}

TEST_CASE("identity substitution gives exactly zero PPXC") {
  const Fixture fx;
  // By definition PPXC uses zero-substitution; here we check the invariant
  // directly: perplexity under identity substitution equals baseline, so the
  // delta vanishes bit-exactly.
  const NeuronSet set = fx.some_set("a");
  InterventionSpec spec;
  spec.set = set;
  spec.source = SubstitutionSource::identity();
  const Intervention iv = spec.compile();
  const double base = perplexity(fx.model, fx.corpora[0], nullptr, 8);
  const double with = perplexity(fx.model, fx.corpora[0], &iv, 8);
  CHECK(base == with);
}

TEST_CASE("ppxc is deterministic and has identical baselines across recomputation") {
  const Fixture fx;
  std::map<LanguageCode, NeuronSet> sets;
  sets["a"] = fx.some_set("a");
  sets["b"] = fx.some_set("b");
  std::map<LanguageCode, Corpus> corpora;
  for (const auto& c : fx.corpora) corpora[c.language] = c;

  const PpxcMatrix m1 = ppxc_matrix(fx.model, sets, corpora, 10 * 16, 2);
  const PpxcMatrix m2 = ppxc_matrix(fx.model, sets, corpora, 10 * 16, 1);
  CHECK(m1.baseline == m2.baseline);
  for (size_t i = 0; i < m1.entries.size(); ++i) CHECK(m1.entries[i] == m2.entries[i]);
}

TEST_CASE("percentile sweep stays finite") {
  const Fixture fx;
  const NeuronSet set = fx.some_set("a");
  for (int p : {5, 10, 25, 75, 90, 95}) {
    const InterventionSpec spec = make_intervention(set, SubstitutionSource::pct(p), fx.stats);
    const Intervention iv = spec.compile();
    const double ppx = perplexity(fx.model, fx.corpora[0], &iv, 4);
    CHECK(std::isfinite(ppx));
  }
}

TEST_CASE("budget smaller than one window is rejected") {
  const Fixture fx;
  std::map<LanguageCode, NeuronSet> sets;
  sets["a"] = fx.some_set("a");
  sets["b"] = fx.some_set("b");
  std::map<LanguageCode, Corpus> corpora;
  for (const auto& c : fx.corpora) corpora[c.language] = c;
  CHECK_THROWS_AS(ppxc_matrix(fx.model, sets, corpora, 15, 1), UsageError);
  // Mismatched coverage.
  sets.erase("b");
  CHECK_THROWS_AS(ppxc_matrix(fx.model, sets, corpora, 160, 1), UsageError);
}

TEST_CASE("ppxc CSV round-trip") {
  PpxcMatrix m;
  m.languages = {"a", "b"};
  m.baseline = {10.5, 11.25};
  m.entries = {{1.5, -0.25}, {0.0, 2.75}};
  m.token_budget = 1000;
  const std::string path = "/tmp/nsppxc_" + std::to_string(::getpid()) + ".csv";
  save_ppxc_csv(m, path);
  const PpxcMatrix r = load_ppxc_csv(path);
  CHECK(r.languages == m.languages);
  CHECK(r.baseline == m.baseline);
  CHECK(r.entries == m.entries);
  CHECK(r.mean_diagonal() == doctest::Approx((1.5 + 2.75) / 2));
  CHECK(r.mean_off_diagonal() == doctest::Approx((-0.25 + 0.0) / 2));
  std::remove(path.c_str());
}
