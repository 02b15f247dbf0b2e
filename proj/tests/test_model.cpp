#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "naive_forward.hpp"
#include "neuronscope/corpus.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/rng.hpp"

using namespace neuronscope;

namespace {
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.d_ff = 24;
  cfg.n_heads = 2;
  cfg.vocab_size = 32;
  cfg.t_max = 16;
  cfg.seed = 7;
  return cfg;
}

TokenBatch random_batch(const ModelConfig& cfg, int rows, int cols, uint64_t seed) {
  TokenBatch b;
  b.rows = rows;
  b.cols = cols;
  Rng rng(seed);
  for (int i = 0; i < rows * cols; ++i) {
    b.tokens.push_back(static_cast<int32_t>(rng.below(cfg.vocab_size)));
  }
  return b;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

std::vector<NeuronId> all_neurons(const ModelConfig& cfg) {
  std::vector<NeuronId> out;
  for (int l = 1; l <= cfg.n_layers; ++l) {
    for (int j = 1; j <= cfg.d_ff; ++j) out.push_back(NeuronId{l, j});
  }
  return out;
}
}  // namespace

TEST_CASE("init is deterministic and validated") {
  const Model a = Model::init(tiny_config());
  const Model b = Model::init(tiny_config());
  auto pa = a.base_params();
  auto pb = b.base_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(*pa[i].mat, *pb[i].mat));
  CHECK(a.fingerprint() == b.fingerprint());

  ModelConfig bad = tiny_config();
  bad.d_model = 64;
  bad.n_heads = 5;
  CHECK_THROWS_AS(Model::init(bad), UsageError);
  bad = tiny_config();
  bad.n_layers = 1;
  CHECK_THROWS_AS(Model::init(bad), UsageError);
}

TEST_CASE("neuron address space is L x d_ff") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 4;
  cfg.d_ff = 128;
  CHECK(cfg.n_neurons() == 512);
}

TEST_CASE("empty intervention is bit-exact") {
  const Model m = Model::init(tiny_config());
  const TokenBatch b = random_batch(m.config, 2, 12, 3);
  const ForwardResult base = m.forward(b);
  Intervention empty;
  ForwardOptions opts;
  opts.intervention = &empty;
  const ForwardResult with = m.forward(b, opts);
  CHECK(bit_equal(base.lm_logits, with.lm_logits));
}

TEST_CASE("identity substitution is bit-exact at every length") {
  const Model m = Model::init(tiny_config());
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenBatch b = random_batch(m.config, 1, 1 + static_cast<int>(rng.below(12)), rng.bits());
    const ForwardResult base = m.forward(b);
    const Intervention iv = Intervention::identity_over(all_neurons(m.config));
    ForwardOptions opts;
    opts.intervention = &iv;
    const ForwardResult with = m.forward(b, opts);
    CHECK(bit_equal(base.lm_logits, with.lm_logits));
  }
}

TEST_CASE("constant substitution at length 1 reproduces the tapped value") {
  // With a single position, substituting each neuron's own just-computed
  // activation is expressible as a constant intervention and must be a
  // bit-exact no-op.
  const Model m = Model::init(tiny_config());
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    TokenBatch b;
    b.rows = 1;
    b.cols = 1;
    b.tokens = {static_cast<int32_t>(rng.below(m.config.vocab_size))};
    ForwardOptions tap_opts;
    tap_opts.want_tap = true;
    const ForwardResult base = m.forward(b, tap_opts);

    Intervention iv;
    for (int l = 1; l <= m.config.n_layers; ++l) {
      for (int j = 1; j <= m.config.d_ff; ++j) {
        iv.values.emplace_back(NeuronId{l, j}, base.tap.layers[l - 1](0, j - 1));
      }
    }
    ForwardOptions opts;
    opts.intervention = &iv;
    const ForwardResult with = m.forward(b, opts);
    CHECK(bit_equal(base.lm_logits, with.lm_logits));
  }
}

TEST_CASE("zero substitution over all neurons reduces to the MLP-free path") {
  const Model m = Model::init(tiny_config());
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const int T = 6 + static_cast<int>(rng.below(8));
    TokenBatch b = random_batch(m.config, 1, T, rng.bits());

    Intervention iv;
    for (const auto& n : all_neurons(m.config)) iv.values.emplace_back(n, 0.0);
    ForwardOptions opts;
    opts.intervention = &iv;
    const ForwardResult got = m.forward(b, opts);

    const auto want = naive::forward_logits(m, b.tokens, /*skip_mlp=*/true);
    for (int t = 0; t < T; ++t) {
      for (int v = 0; v < m.config.vocab_size; ++v) {
        CHECK(got.lm_logits(t, v) == doctest::Approx(want[t][v]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("forward matches the naive oracle") {
  const Model m = Model::init(tiny_config());
  const TokenBatch b = random_batch(m.config, 1, 10, 41);
  const ForwardResult got = m.forward(b);
  const auto want = naive::forward_logits(m, b.tokens, /*skip_mlp=*/false);
  for (int t = 0; t < 10; ++t) {
    for (int v = 0; v < m.config.vocab_size; ++v) {
      CHECK(got.lm_logits(t, v) == doctest::Approx(want[t][v]).epsilon(1e-10));
    }
  }
}

TEST_CASE("causality: suffix mutation leaves prefix logits unchanged") {
  const Model m = Model::init(tiny_config());
  TokenBatch b = random_batch(m.config, 1, 12, 5);
  const ForwardResult base = m.forward(b);
  TokenBatch mutated = b;
  mutated.tokens[9] = (mutated.tokens[9] + 1) % m.config.vocab_size;
  mutated.tokens[11] = (mutated.tokens[11] + 5) % m.config.vocab_size;
  const ForwardResult after = m.forward(mutated);
  for (int t = 0; t < 9; ++t) {
    for (int v = 0; v < m.config.vocab_size; ++v) {
      CHECK(base.lm_logits(t, v) == after.lm_logits(t, v));
    }
  }
}

TEST_CASE("tap on/off yields identical logits") {
  const Model m = Model::init(tiny_config());
  const TokenBatch b = random_batch(m.config, 2, 9, 13);
  const ForwardResult off = m.forward(b);
  ForwardOptions opts;
  opts.want_tap = true;
  const ForwardResult on = m.forward(b, opts);
  CHECK(bit_equal(off.lm_logits, on.lm_logits));
  REQUIRE(on.tap.layers.size() == static_cast<size_t>(m.config.n_layers));
  for (const auto& layer : on.tap.layers) {
    CHECK(layer.rows() == 18);
    CHECK(layer.cols() == m.config.d_ff);
    CHECK(layer.allFinite());
  }
}

TEST_CASE("analytic gradients match central differences") {
  Model m = Model::init(tiny_config());
  const TokenBatch b = random_batch(m.config, 2, 8, 99);
  GradMap grads;
  m.lm_loss_and_grads(b, grads);

  auto params = m.base_params();
  Rng pick(5);
  int checked = 0;
  while (checked < 12) {
    auto& pr = params[pick.below(params.size())];
    const Eigen::Index idx = static_cast<Eigen::Index>(pick.below(pr.mat->size()));
    const double eps = 1e-4;
    const double orig = pr.mat->data()[idx];
    pr.mat->data()[idx] = orig + eps;
    GradMap g1;
    const double lp = m.lm_loss_and_grads(b, g1);
    pr.mat->data()[idx] = orig - eps;
    GradMap g2;
    const double lm = m.lm_loss_and_grads(b, g2);
    pr.mat->data()[idx] = orig;
    const double fd = (lp - lm) / (2 * eps);
    const Matrix* g = grads.find(*pr.mat);
    REQUIRE(g != nullptr);
    const double an = g->data()[idx];
    const double rel =
        std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-8});
    CHECK(rel < 1e-3);
    ++checked;
  }
}

TEST_CASE("uniform logits give perplexity equal to vocab size") {
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = 256;
  Model m = Model::init(cfg);
  m.lm_head.setZero();  // logits identically zero -> uniform distribution
  Corpus c;
  c.language = "x";
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) c.tokens.push_back(static_cast<int32_t>(rng.below(256)));
  CHECK(perplexity(m, c) == doctest::Approx(256.0).epsilon(1e-9));
}

TEST_CASE("perplexity equals the per-window oracle") {
  const Model m = Model::init(tiny_config());
  Corpus c;
  c.language = "x";
  Rng rng(4);
  for (int i = 0; i < 16 * 7 + 3; ++i) {
    c.tokens.push_back(static_cast<int32_t>(rng.below(m.config.vocab_size)));
  }
  const double got = perplexity(m, c);

  // Independent oracle: per-window mean NLL from raw logits, then
  // exp(mean over windows).
  const auto windows = windows_of(c, m.config.t_max);
  double total = 0.0;
  for (const auto& w : windows) {
    const ForwardResult fr = m.forward(w);
    double nll = 0.0;
    for (int t = 0; t + 1 < w.cols; ++t) {
      double mx = -1e300;
      for (int v = 0; v < m.config.vocab_size; ++v) mx = std::max(mx, fr.lm_logits(t, v));
      double z = 0.0;
      for (int v = 0; v < m.config.vocab_size; ++v) z += std::exp(fr.lm_logits(t, v) - mx);
      nll += mx + std::log(z) - fr.lm_logits(t, w.tokens[static_cast<size_t>(t) + 1]);
    }
    total += nll / (w.cols - 1);
  }
  CHECK(got == doctest::Approx(std::exp(total / windows.size())).epsilon(1e-12));

  // Empty intervention changes nothing, exactly.
  Intervention empty;
  CHECK(perplexity(m, c, &empty) == got);

  // Window-level parallelism does not change the reduction.
  CHECK(perplexity(m, c, nullptr, static_cast<size_t>(-1), 4) == got);
}

TEST_CASE("train_lm learns and is deterministic") {
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = kVocabSize;
  SynthLanguageSpec spec{"a", 52, 103, 0, 52, 0.1, 0.7, 21};
  const Corpus train = synthesize_corpus(spec, 6000);
  const Corpus held = synthesize_corpus(spec, 2000, uint64_t{777});

  Model m0 = Model::init(cfg);
  const double before = perplexity(m0, held);

  LmTrainConfig tc;
  tc.steps = 30;
  tc.batch_size = 4;
  tc.seed = 9;
  tc.opt.lr = 2e-3;

  Model m1 = Model::init(cfg);
  const LossTrace t1 = train_lm(m1, {train}, tc);
  CHECK(t1.per_step.size() == 30);
  // One step must move parameters.
  CHECK(m1.fingerprint() != m0.fingerprint());
  const double after = perplexity(m1, held);
  CHECK(after < before);

  Model m2 = Model::init(cfg);
  train_lm(m2, {train}, tc);
  CHECK(m1.fingerprint() == m2.fingerprint());
}

TEST_CASE("language interleave is proportional") {
  // 50/50: any prefix has per-language counts differing by <= 1, and the
  // whole epoch consumes each language exactly.
  const auto sched = interleave_schedule({10, 10});
  REQUIRE(sched.size() == 20);
  int c0 = 0, c1 = 0;
  for (size_t lang : sched) {
    (lang == 0 ? c0 : c1)++;
    CHECK(std::abs(c0 - c1) <= 1);
  }
  CHECK(c0 == 10);
  CHECK(c1 == 10);

  // Uneven mix stays proportional within one batch at every prefix.
  const auto uneven = interleave_schedule({9, 3});
  int u0 = 0, u1 = 0, at = 0;
  for (size_t lang : uneven) {
    ++at;
    (lang == 0 ? u0 : u1)++;
    CHECK(std::fabs(u0 - at * 9.0 / 12.0) <= 1.0);
    CHECK(std::fabs(u1 - at * 3.0 / 12.0) <= 1.0);
  }
  CHECK(u0 == 9);
  CHECK(u1 == 3);
}

TEST_CASE("divergence aborts with a numeric error") {
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = kVocabSize;
  SynthLanguageSpec spec{"a", 52, 103, 0, 52, 0.0, 0.7, 21};
  const Corpus train = synthesize_corpus(spec, 4000);
  LmTrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 4;
  tc.seed = 9;
  tc.opt.lr = 1e18;  // guaranteed blow-up
  tc.opt.clip_norm = 1e30;
  Model m = Model::init(cfg);
  CHECK_THROWS_AS(train_lm(m, {train}, tc), NumericError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  ModelConfig cfg = tiny_config();
  Model m = Model::init(cfg);
  // Make the parameters non-trivial.
  m.lm_head(0, 0) = 0.123456789123456789;
  const std::string path = "/tmp/nsmodel_test_" + std::to_string(::getpid()) + ".ckpt";
  save_checkpoint(m, path);
  const Model r = load_checkpoint(path);
  CHECK(r.fingerprint() == m.fingerprint());
  auto pa = m.base_params();
  auto pb = r.base_params();
  for (size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(*pa[i].mat, *pb[i].mat));
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(path), ArtifactError);
}

TEST_CASE("intervention bounds are validated") {
  const Model m = Model::init(tiny_config());
  const TokenBatch b = random_batch(m.config, 1, 4, 1);
  Intervention iv;
  iv.values.emplace_back(NeuronId{m.config.n_layers + 1, 1}, 0.0);
  ForwardOptions opts;
  opts.intervention = &iv;
  CHECK_THROWS_AS(m.forward(b, opts), UsageError);
}
