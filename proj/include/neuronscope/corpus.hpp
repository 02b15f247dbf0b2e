#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace neuronscope {

// Byte-level vocabulary: 256 byte values plus 4 special ids.
inline constexpr int32_t kByteVocab = 256;
inline constexpr int32_t kTokBos = 256;
inline constexpr int32_t kTokSep = 257;
inline constexpr int32_t kTokEos = 258;
inline constexpr int32_t kTokPad = 259;  // reserved; never emitted (partial windows are dropped)
inline constexpr int32_t kVocabSize = 260;

using LanguageCode = std::string;

/// A language-tagged token stream. Immutable after construction and safe to
/// share across threads.
struct Corpus {
  LanguageCode language;
  std::vector<int32_t> tokens;
  std::string source;  // file path or "synth:<seed>"

  size_t size() const { return tokens.size(); }
};

/// Parameters of one synthetic language: a private contiguous token-id range,
/// a shared range drawn with probability overlap_fraction, and a seeded
/// bigram process whose sharpness is set by bigram_temperature.
struct SynthLanguageSpec {
  LanguageCode code;
  int32_t private_lo = 0;  // [private_lo, private_hi)
  int32_t private_hi = 0;
  int32_t shared_lo = 0;  // [shared_lo, shared_hi)
  int32_t shared_hi = 0;
  double overlap_fraction = 0.0;
  double bigram_temperature = 1.0;
  uint64_t seed = 0;

  void validate(int32_t vocab_size = kVocabSize) const;
  static SynthLanguageSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Reads a text file, shuffles it at paragraph granularity with `seed`,
/// byte-tokenizes and truncates to `token_cap`.
Corpus ingest_corpus(const std::string& path, const LanguageCode& language,
                     size_t token_cap, uint64_t seed);

/// Tokenizes in-memory text the same way ingest_corpus does.
Corpus ingest_text(const std::string& text, const LanguageCode& language,
                   size_t token_cap, uint64_t seed, const std::string& source_tag);

/// The bigram transition table is a fixed function of spec.seed (the
/// language's "grammar"); stream_seed varies only the sampling stream and
/// defaults to the spec seed.
Corpus synthesize_corpus(const SynthLanguageSpec& spec, size_t n_tokens,
                         std::optional<uint64_t> stream_seed = std::nullopt);

/// One batch of same-length windows, stored row-major (rows x cols tokens).
struct TokenBatch {
  std::vector<int32_t> tokens;
  int rows = 0;
  int cols = 0;

  const int32_t* row(int r) const { return tokens.data() + static_cast<size_t>(r) * cols; }
};

/// Cuts the corpus into non-overlapping windows of exactly t_max tokens
/// (final partial window dropped) and groups them into batches. With a seed,
/// window order is shuffled deterministically; without, corpus order.
std::vector<TokenBatch> batch_sequences(const Corpus& corpus, int t_max, int batch_size,
                                        std::optional<uint64_t> shuffle_seed = std::nullopt);

/// The windows themselves, in corpus order. Exact partition:
/// windows.size() * t_max + dropped == corpus.size(), dropped < t_max.
std::vector<TokenBatch> windows_of(const Corpus& corpus, int t_max);
size_t window_count(const Corpus& corpus, int t_max);

// Binary corpus file: 8-byte magic "NSCORP01", u32 LE language-code length,
// the code bytes, then token ids as LE u32 until EOF.
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

}  // namespace neuronscope
