#include "neuronscope/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "neuronscope/errors.hpp"
#include "neuronscope/io.hpp"
#include "neuronscope/rng.hpp"

namespace neuronscope {

namespace {
constexpr char kCorpusMagic[9] = "NSCORP01";

bool all_whitespace(const std::string& s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

/// Splits on blank lines (one or more newline-whitespace-newline runs).
std::vector<std::string> split_paragraphs(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  size_t i = 0;
  while (i < text.size()) {
    // A blank line: '\n' followed by optional horizontal whitespace and '\n'.
    if (text[i] == '\n') {
      size_t j = i + 1;
      while (j < text.size() && (text[j] == ' ' || text[j] == '\t' || text[j] == '\r')) ++j;
      if (j < text.size() && text[j] == '\n') {
        if (!all_whitespace(current)) out.push_back(current);
        current.clear();
        // Swallow the whole blank-line run.
        i = j + 1;
        while (i < text.size() && (text[i] == '\n' || text[i] == ' ' || text[i] == '\t' ||
                                   text[i] == '\r')) {
          size_t k = i;
          while (k < text.size() && (text[k] == ' ' || text[k] == '\t' || text[k] == '\r')) ++k;
          if (k < text.size() && text[k] == '\n') {
            i = k + 1;
          } else {
            break;
          }
        }
        continue;
      }
    }
    current.push_back(text[i]);
    ++i;
  }
  if (!all_whitespace(current)) out.push_back(current);
  return out;
}
}  // namespace

void SynthLanguageSpec::validate(int32_t vocab_size) const {
  if (code.empty()) throw UsageError("synth language code must be non-empty");
  if (private_lo < 0 || private_hi > vocab_size || shared_lo < 0 || shared_hi > vocab_size ||
      private_lo > private_hi || shared_lo > shared_hi) {
    throw UsageError("synth language '" + code + "': token ranges out of vocabulary bounds");
  }
  if (overlap_fraction < 0.0 || overlap_fraction > 1.0) {
    throw UsageError("synth language '" + code + "': overlap_fraction must be in [0,1]");
  }
  if (!(bigram_temperature > 0.0)) {
    throw UsageError("synth language '" + code + "': bigram_temperature must be > 0");
  }
  if (overlap_fraction < 1.0 && private_lo == private_hi) {
    throw UsageError("synth language '" + code +
                     "': empty private range with overlap_fraction < 1");
  }
  if (overlap_fraction > 0.0 && shared_lo == shared_hi) {
    throw UsageError("synth language '" + code +
                     "': empty shared range with overlap_fraction > 0");
  }
}

SynthLanguageSpec SynthLanguageSpec::from_json(const nlohmann::json& j) {
  SynthLanguageSpec s;
  s.code = j.at("code").get<std::string>();
  s.private_lo = j.at("private_lo").get<int32_t>();
  s.private_hi = j.at("private_hi").get<int32_t>();
  s.shared_lo = j.value("shared_lo", 0);
  s.shared_hi = j.value("shared_hi", 0);
  s.overlap_fraction = j.at("overlap_fraction").get<double>();
  s.bigram_temperature = j.at("bigram_temperature").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

nlohmann::json SynthLanguageSpec::to_json() const {
  nlohmann::json j;
  j["code"] = code;
  j["private_lo"] = private_lo;
  j["private_hi"] = private_hi;
  j["shared_lo"] = shared_lo;
  j["shared_hi"] = shared_hi;
  j["overlap_fraction"] = overlap_fraction;
  j["bigram_temperature"] = bigram_temperature;
  j["seed"] = seed;
  return j;
}

Corpus ingest_text(const std::string& text, const LanguageCode& language, size_t token_cap,
                   uint64_t seed, const std::string& source_tag) {
  if (language.empty()) throw UsageError("language code must be non-empty");
  std::vector<std::string> paragraphs = split_paragraphs(text);
  if (paragraphs.empty()) throw ArtifactError("empty corpus: " + source_tag);

  Rng rng(derive_seed(seed, "ingest-shuffle"));
  rng.shuffle(paragraphs);

  Corpus c;
  c.language = language;
  c.source = source_tag;
  c.tokens.reserve(std::min(token_cap, text.size()));
  for (size_t pi = 0; pi < paragraphs.size() && c.tokens.size() < token_cap; ++pi) {
    if (pi > 0) {
      // Paragraphs stay separated by a blank line in the token stream.
      c.tokens.push_back('\n');
      if (c.tokens.size() >= token_cap) break;
      c.tokens.push_back('\n');
    }
    for (unsigned char byte : paragraphs[pi]) {
      if (c.tokens.size() >= token_cap) break;
      c.tokens.push_back(static_cast<int32_t>(byte));
    }
  }
  if (c.tokens.empty()) throw ArtifactError("empty corpus: " + source_tag);
  return c;
}

Corpus ingest_corpus(const std::string& path, const LanguageCode& language, size_t token_cap,
                     uint64_t seed) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("unreadable file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return ingest_text(text, language, token_cap, seed, path);
}

namespace {
/// Fixed pseudo-random bigram weight for (prev, next) in [0, 1).
double bigram_logit(uint64_t seed, int32_t prev, int32_t next) {
  const uint64_t h = derive_seed(seed, "bigram", static_cast<uint64_t>(prev),
                                 static_cast<uint64_t>(next));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Samples from softmax(logits / temperature) over [lo, hi) given prev.
int32_t sample_bigram(Rng& rng, uint64_t seed, int32_t prev, int32_t lo, int32_t hi,
                      double temperature) {
  const int n = hi - lo;
  if (n == 1) return lo;
  std::vector<double> w(static_cast<size_t>(n));
  double max_logit = -1.0;
  for (int t = 0; t < n; ++t) {
    w[static_cast<size_t>(t)] = bigram_logit(seed, prev, lo + t) / temperature;
    max_logit = std::max(max_logit, w[static_cast<size_t>(t)]);
  }
  double total = 0.0;
  for (double& x : w) {
    x = std::exp(x - max_logit);
    total += x;
  }
  double u = rng.uniform() * total;
  for (int t = 0; t < n; ++t) {
    u -= w[static_cast<size_t>(t)];
    if (u < 0.0) return lo + t;
  }
  return hi - 1;
}
}  // namespace

Corpus synthesize_corpus(const SynthLanguageSpec& spec, size_t n_tokens,
                         std::optional<uint64_t> stream_seed) {
  spec.validate();
  if (n_tokens == 0) throw UsageError("n_tokens must be > 0");

  Rng rng(derive_seed(stream_seed.value_or(spec.seed), "synth", 0, 0));
  Corpus c;
  c.language = spec.code;
  c.source = "synth:" + std::to_string(spec.seed);
  c.tokens.reserve(n_tokens);

  int32_t prev = spec.overlap_fraction < 1.0 ? spec.private_lo : spec.shared_lo;
  for (size_t i = 0; i < n_tokens; ++i) {
    const bool shared = rng.uniform() < spec.overlap_fraction;
    const int32_t lo = shared ? spec.shared_lo : spec.private_lo;
    const int32_t hi = shared ? spec.shared_hi : spec.private_hi;
    const int32_t tok = sample_bigram(rng, spec.seed, prev, lo, hi, spec.bigram_temperature);
    c.tokens.push_back(tok);
    prev = tok;
  }
  return c;
}

size_t window_count(const Corpus& corpus, int t_max) {
  if (t_max < 2) throw UsageError("t_max must be >= 2");
  return corpus.size() / static_cast<size_t>(t_max);
}

std::vector<TokenBatch> windows_of(const Corpus& corpus, int t_max) {
  const size_t n = window_count(corpus, t_max);
  if (n == 0) throw UsageError("corpus shorter than context");
  std::vector<TokenBatch> out;
  out.reserve(n);
  for (size_t w = 0; w < n; ++w) {
    TokenBatch b;
    b.rows = 1;
    b.cols = t_max;
    b.tokens.assign(corpus.tokens.begin() + static_cast<ptrdiff_t>(w * t_max),
                    corpus.tokens.begin() + static_cast<ptrdiff_t>((w + 1) * t_max));
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<TokenBatch> batch_sequences(const Corpus& corpus, int t_max, int batch_size,
                                        std::optional<uint64_t> shuffle_seed) {
  if (t_max < 2) throw UsageError("t_max must be >= 2");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  const size_t n_windows = corpus.size() / static_cast<size_t>(t_max);
  if (n_windows == 0) throw UsageError("corpus shorter than context");

  std::vector<size_t> order(n_windows);
  for (size_t i = 0; i < n_windows; ++i) order[i] = i;
  if (shuffle_seed) {
    Rng rng(derive_seed(*shuffle_seed, "batch-order"));
    rng.shuffle(order);
  }

  std::vector<TokenBatch> batches;
  for (size_t start = 0; start < n_windows; start += static_cast<size_t>(batch_size)) {
    const size_t rows = std::min(static_cast<size_t>(batch_size), n_windows - start);
    TokenBatch b;
    b.rows = static_cast<int>(rows);
    b.cols = t_max;
    b.tokens.reserve(rows * static_cast<size_t>(t_max));
    for (size_t r = 0; r < rows; ++r) {
      const size_t w = order[start + r];
      b.tokens.insert(b.tokens.end(),
                      corpus.tokens.begin() + static_cast<ptrdiff_t>(w * t_max),
                      corpus.tokens.begin() + static_cast<ptrdiff_t>((w + 1) * t_max));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  atomic_write_file(path, [&](std::ostream& os) {
    os.write(kCorpusMagic, 8);
    write_u32(os, static_cast<uint32_t>(corpus.language.size()));
    os.write(corpus.language.data(), static_cast<std::streamsize>(corpus.language.size()));
    for (int32_t t : corpus.tokens) write_u32(os, static_cast<uint32_t>(t));
  });
}

Corpus load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("missing corpus file: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != std::string(kCorpusMagic, 8)) {
    throw ArtifactError("bad corpus magic in " + path);
  }
  const uint32_t lang_len = read_u32(f);
  if (lang_len == 0 || lang_len > 4096) throw ArtifactError("bad language code in " + path);
  std::string lang(lang_len, '\0');
  f.read(lang.data(), lang_len);
  if (!f) throw ArtifactError("truncated corpus file: " + path);

  Corpus c;
  c.language = lang;
  c.source = path;
  // Token ids run to EOF.
  while (true) {
    unsigned char buf[4];
    f.read(reinterpret_cast<char*>(buf), 4);
    if (f.gcount() == 0) break;
    if (f.gcount() != 4) throw ArtifactError("corpus token stream misaligned in " + path);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[i]) << (8 * i);
    c.tokens.push_back(static_cast<int32_t>(v));
  }
  if (c.tokens.empty()) throw ArtifactError("empty corpus file: " + path);
  return c;
}

}  // namespace neuronscope
