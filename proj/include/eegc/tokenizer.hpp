#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace eegc {

// Structured tokenizer: fixed vocabulary of specials, the 256 raw bytes,
// one token per quantized value (" 0".." 255"), channel names, segment tags,
// and the words used by prompts and responses. Encoding is greedy longest
// match, so any byte string is covered (bytes are the fallback) and decoding
// is plain concatenation.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kNumSpecial = 4;
  static constexpr int kFirstByte = kNumSpecial;

  Tokenizer();
  ~Tokenizer();
  Tokenizer(const Tokenizer&) = delete;
  Tokenizer& operator=(const Tokenizer&) = delete;

  // Process-wide instance; the vocabulary is immutable.
  static const Tokenizer& instance();

  int vocab_size() const { return static_cast<int>(pieces_.size()); }

  std::vector<int> encode(std::string_view text) const;
  // Specials decode to nothing. Throws std::out_of_range on ids outside the
  // vocabulary.
  std::string decode(std::span<const int> ids) const;

  // Raw piece for an id ("<bos>" etc. for specials).
  const std::string& piece(int id) const;
  // Id of an exact piece, or -1.
  int find(std::string_view piece) const;
  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }

 private:
  struct Node;
  void add(std::string piece, bool in_trie);

  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> index_;
  std::unique_ptr<Node> root_;
};

// Training sequence: [BOS] prompt [SEP] response [EOS]. loss_mask[t] is 1
// for tokens the model is scored on predicting (response and EOS).
struct Sequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> loss_mask;
  std::size_t prompt_len{0};  // tokens up to and including SEP
};

Sequence make_sequence(const Tokenizer& tok, std::string_view prompt,
                       std::string_view response);
// [BOS] prompt [SEP] — the generation context.
std::vector<int> make_prompt_ids(const Tokenizer& tok, std::string_view prompt);

}  // namespace eegc
