#include "eegc/tokenizer.hpp"

#include <map>
#include <set>
#include <stdexcept>

#include "eegc/dataset.hpp"
#include "eegc/emotion.hpp"

namespace eegc {

struct Tokenizer::Node {
  std::map<unsigned char, std::unique_ptr<Node>> next;
  int id{-1};
};

namespace {

// 10-20 / 10-10 electrode labels commonly found in EEG montages.
const char* const kChannelNames[] = {
    "Fp1", "Fp2", "Fpz", "AF3", "AF4", "AF7", "AF8", "AFz", "F1",  "F2",
    "F3",  "F4",  "F5",  "F6",  "F7",  "F8",  "Fz",  "FC1", "FC2", "FC3",
    "FC4", "FC5", "FC6", "FT7", "FT8", "FCz", "C1",  "C2",  "C3",  "C4",
    "C5",  "C6",  "Cz",  "T3",  "T4",  "T5",  "T6",  "T7",  "T8",  "TP7",
    "TP8", "CP1", "CP2", "CP3", "CP4", "CP5", "CP6", "CPz", "P1",  "P2",
    "P3",  "P4",  "P5",  "P6",  "P7",  "P8",  "Pz",  "PO3", "PO4", "PO7",
    "PO8", "POz", "O1",  "O2",  "Oz",  "A1",  "A2",  "M1",  "M2",
};

// Everyday words for demographics, follow-up questions and the small general
// text corpus; anything else falls back to bytes.
const char* const kWords[] = {
    "the", "a", "an", "and", "or", "of", "to", "in", "on", "for", "with",
    "is", "are", "was", "were", "be", "been", "it", "this", "that", "these",
    "there", "what", "why", "how", "when", "which", "who", "can", "should",
    "will", "would", "may", "not", "no", "yes", "do", "does", "has", "have",
    "had", "more", "most", "less", "some", "many", "much", "very", "also",
    "than", "then", "from", "by", "as", "at", "about", "into", "over",
    "after", "before", "during", "between", "each", "every", "other",
    "people", "person", "day", "days", "week", "weeks", "month", "year",
    "years", "old", "time", "life", "world", "work", "home", "water", "food",
    "sun", "rain", "light", "city", "river", "tree", "trees", "small",
    "large", "good", "new", "first", "long", "little", "great", "high",
    "low", "often", "usually", "sometimes", "always", "never", "make",
    "makes", "made", "take", "takes", "use", "used", "help", "helps", "know",
    "known", "find", "found", "see", "seen", "live", "lives", "grow",
    "grows", "walk", "read", "write", "learn", "music", "book", "books",
    "school", "children", "family", "friends", "morning", "evening", "night",
    "sleep", "rest", "body", "mind", "brain", "heart", "health", "doctor",
    "patient", "female", "male", "unspecified", "negative", "positive",
    "neutral", "calm", "tense", "smiling", "frowning", "tired", "relaxed",
    "emotion", "emotional", "state", "diagnosis", "treatment", "plan",
    "signal", "signals", "question", "answer", "follow", "up", "visit",
    "current", "feel", "feels", "feeling", "better", "worse", "same",
    "next", "one", "two", "three", "four", "five", "ten", "hundred",
};

std::set<std::string> response_words() {
  std::set<std::string> out;
  for (Emotion e : kAllEmotions) {
    out.insert(" " + std::string(to_string(e)));
    const std::string_view t = treatment_template(e);
    std::size_t i = 0;
    while (i < t.size()) {
      while (i < t.size() && t[i] == ' ') ++i;
      std::size_t j = i;
      while (j < t.size() && t[j] != ' ' && t[j] != ',' && t[j] != '.') ++j;
      if (j > i) out.insert(" " + std::string(t.substr(i, j - i)));
      i = j + 1;
    }
  }
  return out;
}

}  // namespace

Tokenizer::Tokenizer() : root_(std::make_unique<Node>()) {
  add("<pad>", false);
  add("<bos>", false);
  add("<eos>", false);
  add("<sep>", false);
  for (int b = 0; b < 256; ++b) add(std::string(1, static_cast<char>(b)), true);
  for (int v = 0; v < 256; ++v) add(" " + std::to_string(v), true);

  add(std::string(kSystemPreamble), true);
  add("\n\n", true);
  add("Patient", true);
  add("Emotion", true);
  add("Treatment", true);
  for (const char* ch : kChannelNames) add(ch, true);
  for (int k = 1; k <= 10; ++k) add("[" + std::to_string(k) + "]", true);

  std::set<std::string> words = response_words();
  for (const char* w : kWords) words.insert(" " + std::string(w));
  for (const auto& w : words) {
    if (!index_.contains(w)) add(w, true);
  }
}

Tokenizer::~Tokenizer() = default;

const Tokenizer& Tokenizer::instance() {
  static const Tokenizer tok;
  return tok;
}

void Tokenizer::add(std::string piece, bool in_trie) {
  const int id = static_cast<int>(pieces_.size());
  if (!index_.emplace(piece, id).second) {
    throw std::logic_error("duplicate vocabulary piece");
  }
  if (in_trie) {
    Node* n = root_.get();
    for (unsigned char c : piece) {
      auto& slot = n->next[c];
      if (!slot) slot = std::make_unique<Node>();
      n = slot.get();
    }
    n->id = id;
  }
  pieces_.push_back(std::move(piece));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const Node* n = root_.get();
    int best = -1;
    std::size_t best_len = 0;
    for (std::size_t j = i; j < text.size(); ++j) {
      auto it = n->next.find(static_cast<unsigned char>(text[j]));
      if (it == n->next.end()) break;
      n = it->second.get();
      if (n->id >= 0) {
        best = n->id;
        best_len = j - i + 1;
      }
    }
    // every single byte is in the trie, so best is always set
    out.push_back(best);
    i += best_len;
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) {
      throw std::out_of_range("token id " + std::to_string(id) +
                              " outside vocabulary");
    }
    if (is_special(id)) continue;
    out += pieces_[static_cast<std::size_t>(id)];
  }
  return out;
}

const std::string& Tokenizer::piece(int id) const {
  if (id < 0 || id >= vocab_size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return pieces_[static_cast<std::size_t>(id)];
}

int Tokenizer::find(std::string_view piece) const {
  const auto it = index_.find(std::string(piece));
  return it == index_.end() ? -1 : it->second;
}

Sequence make_sequence(const Tokenizer& tok, std::string_view prompt,
                       std::string_view response) {
  Sequence s;
  s.ids = make_prompt_ids(tok, prompt);
  s.prompt_len = s.ids.size();
  s.loss_mask.assign(s.ids.size(), 0);
  for (int id : tok.encode(response)) {
    s.ids.push_back(id);
    s.loss_mask.push_back(1);
  }
  s.ids.push_back(Tokenizer::kEos);
  s.loss_mask.push_back(1);
  return s;
}

std::vector<int> make_prompt_ids(const Tokenizer& tok, std::string_view prompt) {
  std::vector<int> ids;
  ids.push_back(Tokenizer::kBos);
  const auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Tokenizer::kSep);
  return ids;
}

}  // namespace eegc
