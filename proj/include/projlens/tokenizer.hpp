#pragma once

#include <map>
#include <string>
#include <vector>

#include "projlens/common.hpp"

namespace projlens {

// Minimal tokenizer contract required by prompt rendering: encode text,
// decode single ids, and expose the BOS / newline ids.
class TokenizerView {
 public:
  virtual ~TokenizerView() = default;
  virtual std::vector<int> encode(const std::string& text) const = 0;
  virtual std::string decode(int token_id) const = 0;
  virtual int vocab_size() const = 0;
  virtual int bos_id() const = 0;
  virtual int newline_id() const = 0;
};

// Deterministic tokenizer for the reference backends: printable ASCII
// single-char tokens, merged tokens for the prompt scaffolding and
// two-decimal coordinates, plus space-prefixed word tokens for a supplied
// word list (the label vocabulary, typically). Greedy longest match, so
// " dog" encodes as one token when "dog" is in the word list and as
// characters otherwise. Mirrors the merge behavior of real BPE vocabularies
// enough for the loss mask and the probe to be meaningful.
class TinyTokenizer : public TokenizerView {
 public:
  explicit TinyTokenizer(const std::vector<std::string>& words = {}) {
    add_token("<bos>");
    add_token("\n");
    add_token("<unk>");
    for (char c = 32; c < 127; ++c) add_token(std::string(1, c));
    add_token("bbox:[[");
    add_token("],[");
    add_token("]]");
    for (int i = 0; i <= 100; ++i) {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "%d.%02d", i / 100, i % 100);
      add_token(buf);
    }
    for (const auto& w : words) {
      for (const auto& part : split(to_lower(trim(w)), ' ')) {
        if (part.empty()) continue;
        add_token(" " + part);
      }
    }
  }

  std::vector<int> encode(const std::string& text) const override {
    std::vector<int> ids;
    size_t pos = 0;
    while (pos < text.size()) {
      // longest match wins; single printable chars guarantee progress
      size_t best_len = 0;
      int best_id = unk_id_;
      const size_t max_len = std::min(max_token_len_, text.size() - pos);
      for (size_t len = max_len; len >= 1; --len) {
        const auto it = token_to_id_.find(text.substr(pos, len));
        if (it != token_to_id_.end()) {
          best_len = len;
          best_id = it->second;
          break;
        }
      }
      if (best_len == 0) {
        ids.push_back(unk_id_);
        pos += 1;
      } else {
        ids.push_back(best_id);
        pos += best_len;
      }
    }
    return ids;
  }

  std::string decode(int token_id) const override {
    if (token_id < 0 || token_id >= static_cast<int>(id_to_token_.size()))
      throw_runtime("token id out of range: " + std::to_string(token_id));
    return id_to_token_[static_cast<size_t>(token_id)];
  }

  int vocab_size() const override { return static_cast<int>(id_to_token_.size()); }
  int bos_id() const override { return 0; }
  int newline_id() const override { return 1; }

 private:
  void add_token(const std::string& tok) {
    if (token_to_id_.count(tok)) return;
    token_to_id_[tok] = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(tok);
    max_token_len_ = std::max(max_token_len_, tok.size());
  }

  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
  size_t max_token_len_ = 1;
  static constexpr int unk_id_ = 2;
};

}  // namespace projlens
