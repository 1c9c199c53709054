#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mlrecall/core/error.hpp"
#include "mlrecall/core/rng.hpp"
#include "mlrecall/core/text.hpp"
#include "mlrecall/model/config.hpp"

namespace mlrecall {

// Text <-> token-id codec over an explicit vocabulary.
//
// Word mode (toy fixtures): whitespace-delimited words, CJK codepoints split
// individually, "\n" as its own token. Words missing from the vocabulary hash
// into the regular-id range, so every string encodes.
//
// BytePiece mode (converted byte-level BPE checkpoints): text is mapped through
// the GPT-2 byte-to-unicode table and segmented by greedy longest match. This
// approximates, but does not reproduce, BPE merge order.
class Tokenizer {
public:
  enum class Mode { Word, BytePiece };

  Tokenizer(std::vector<std::string> vocab, Mode mode, std::size_t n_special, std::optional<TokenId> bos,
            std::optional<TokenId> eos)
      : vocab_(std::move(vocab)), mode_(mode), n_special_(n_special), bos_(bos), eos_(eos) {
    if (vocab_.size() <= n_special_) throw DimensionError("vocabulary has no regular tokens");
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second)
        throw FormatError("duplicate vocabulary entry '" + vocab_[i] + "'");
      max_piece_bytes_ = std::max(max_piece_bytes_, vocab_[i].size());
    }
    if (mode_ == Mode::BytePiece) build_byte_tables();
  }

  std::size_t vocab_size() const { return vocab_.size(); }
  Mode mode() const { return mode_; }
  std::size_t n_special() const { return n_special_; }
  std::optional<TokenId> bos() const { return bos_; }
  std::optional<TokenId> eos() const { return eos_; }
  const std::vector<std::string>& pieces() const { return vocab_; }
  const std::string& piece(TokenId id) const { return vocab_.at(checked(id)); }

  std::optional<TokenId> lookup(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Generation stops at EOS or at a token whose surface text contains a newline.
  bool is_stop(TokenId id) const {
    if (eos_ && id == *eos_) return true;
    return decode(id).find('\n') != std::string::npos;
  }

  std::vector<TokenId> encode(std::string_view text, bool add_bos = false) const {
    std::vector<TokenId> out;
    if (add_bos && bos_) out.push_back(*bos_);
    if (mode_ == Mode::Word)
      encode_words(text, out);
    else
      encode_pieces(text, out);
    return out;
  }

  // Surface text of a single token.
  std::string decode(TokenId id) const {
    const auto& p = piece(id);
    if (mode_ == Mode::Word || static_cast<std::size_t>(id) < n_special_) return p;
    std::string bytes;
    for (char32_t c : text::codepoints(p)) {
      auto it = unicode_to_byte_.find(c);
      if (it == unicode_to_byte_.end()) return p;
      bytes.push_back(static_cast<char>(it->second));
    }
    return bytes;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto s = decode(ids[i]);
      if (mode_ == Mode::Word && i > 0 && needs_space(out, s)) out.push_back(' ');
      out += s;
    }
    return out;
  }

  // First token of `answer` as it would appear when continuing a prompt.
  TokenId continuation_first_token(std::string_view answer) const {
    auto trimmed = text::trim(answer);
    if (trimmed.empty()) throw DomainError("empty candidate string");
    std::string probe = trimmed;
    if (mode_ == Mode::BytePiece && !text::contains_cjk(trimmed)) probe = " " + trimmed;
    auto ids = encode(probe);
    if (ids.empty()) throw DomainError("candidate '" + trimmed + "' produced no tokens");
    return ids.front();
  }

private:
  std::vector<std::string> vocab_;
  Mode mode_;
  std::size_t n_special_;
  std::optional<TokenId> bos_, eos_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_bytes_ = 0;
  std::array<std::string, 256> byte_to_unicode_{};
  std::unordered_map<char32_t, unsigned char> unicode_to_byte_;

  std::size_t checked(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return static_cast<std::size_t>(id);
  }

  static bool needs_space(const std::string& left, const std::string& right) {
    if (left.empty() || right.empty()) return false;
    if (left.back() == '\n' || right == "\n") return false;
    return !(text::contains_cjk(right) && text::contains_cjk(left));
  }

  TokenId word_id(const std::string& word) const {
    if (auto id = lookup(word)) return *id;
    const auto regular = vocab_.size() - n_special_;
    return static_cast<TokenId>(n_special_ + fnv1a64(word) % regular);
  }

  void encode_words(std::string_view text, std::vector<TokenId>& out) const {
    std::string word;
    auto flush = [&] {
      if (!word.empty()) out.push_back(word_id(word));
      word.clear();
    };
    for (char32_t c : text::codepoints(text)) {
      if (c == U'\n') {
        flush();
        out.push_back(word_id("\n"));
      } else if (text::is_space_codepoint(c)) {
        flush();
      } else if (text::is_cjk_codepoint(c)) {
        flush();
        out.push_back(word_id(text::from_codepoint(c)));
      } else {
        word += text::from_codepoint(c);
      }
    }
    flush();
  }

  void build_byte_tables() {
    std::vector<int> direct;
    for (int b = 33; b <= 126; ++b) direct.push_back(b);
    for (int b = 161; b <= 172; ++b) direct.push_back(b);
    for (int b = 174; b <= 255; ++b) direct.push_back(b);
    int extra = 0;
    for (int b = 0; b < 256; ++b) {
      char32_t cp;
      if (std::find(direct.begin(), direct.end(), b) != direct.end())
        cp = static_cast<char32_t>(b);
      else
        cp = static_cast<char32_t>(256 + extra++);
      byte_to_unicode_[static_cast<std::size_t>(b)] = text::from_codepoint(cp);
      unicode_to_byte_[cp] = static_cast<unsigned char>(b);
    }
  }

  void encode_pieces(std::string_view text, std::vector<TokenId>& out) const {
    std::string mapped;
    for (unsigned char b : text) mapped += byte_to_unicode_[b];
    std::size_t i = 0;
    while (i < mapped.size()) {
      std::size_t len = std::min(max_piece_bytes_, mapped.size() - i);
      for (; len > 0; --len) {
        if (auto id = lookup(std::string_view(mapped).substr(i, len)); id && static_cast<std::size_t>(*id) >= n_special_) {
          out.push_back(*id);
          break;
        }
      }
      if (len == 0) throw FormatError("byte sequence not covered by vocabulary");
      i += len;
    }
  }
};

} // namespace mlrecall
