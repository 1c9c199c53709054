#pragma once

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/uscript.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <string>
#include <string_view>
#include <vector>

#include "mlrecall/core/error.hpp"

namespace mlrecall::text {

inline bool is_valid_utf8(std::string_view s) {
  std::int32_t i = 0;
  const auto n = static_cast<std::int32_t>(s.size());
  const auto* p = reinterpret_cast<const std::uint8_t*>(s.data());
  while (i < n) {
    UChar32 c;
    U8_NEXT(p, i, n, c);
    if (c < 0) return false;
  }
  return true;
}

inline std::vector<char32_t> codepoints(std::string_view s) {
  std::vector<char32_t> out;
  std::int32_t i = 0;
  const auto n = static_cast<std::int32_t>(s.size());
  const auto* p = reinterpret_cast<const std::uint8_t*>(s.data());
  while (i < n) {
    UChar32 c;
    U8_NEXT(p, i, n, c);
    if (c < 0) throw FormatError("invalid UTF-8 sequence");
    out.push_back(static_cast<char32_t>(c));
  }
  return out;
}

inline std::string from_codepoint(char32_t c) {
  std::string out;
  icu::UnicodeString(static_cast<UChar32>(c)).toUTF8String(out);
  return out;
}

inline const icu::Normalizer2& nfc() {
  UErrorCode err = U_ZERO_ERROR;
  const auto* n = icu::Normalizer2::getNFCInstance(err);
  if (U_FAILURE(err) || n == nullptr) throw Error("ICU NFC normalizer unavailable");
  return *n;
}

inline std::string to_nfc(std::string_view s) {
  if (!is_valid_utf8(s)) throw FormatError("invalid UTF-8 sequence");
  UErrorCode err = U_ZERO_ERROR;
  auto u = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<std::int32_t>(s.size())));
  auto normalized = nfc().normalize(u, err);
  if (U_FAILURE(err)) throw FormatError("NFC normalization failed");
  std::string out;
  normalized.toUTF8String(out);
  return out;
}

inline std::string casefold(std::string_view s) {
  auto u = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<std::int32_t>(s.size())));
  u.foldCase();
  std::string out;
  u.toUTF8String(out);
  return out;
}

inline bool is_cjk_codepoint(char32_t c) {
  UErrorCode err = U_ZERO_ERROR;
  const auto script = uscript_getScript(static_cast<UChar32>(c), &err);
  if (U_FAILURE(err)) return false;
  switch (script) {
  case USCRIPT_HAN:
  case USCRIPT_HIRAGANA:
  case USCRIPT_KATAKANA:
  case USCRIPT_HANGUL:
    return true;
  default:
    return false;
  }
}

inline bool contains_cjk(std::string_view s) {
  for (char32_t c : codepoints(s))
    if (is_cjk_codepoint(c)) return true;
  return false;
}

inline bool is_space_codepoint(char32_t c) {
  // U+0120 and U+2581 are the space markers of byte-level and sentencepiece
  // vocabularies; decoded tokens may still carry them.
  return u_isUWhiteSpace(static_cast<UChar32>(c)) || c == 0x0120 || c == 0x2581;
}

inline std::string trim(std::string_view s) {
  auto cps = codepoints(s);
  std::size_t b = 0, e = cps.size();
  while (b < e && is_space_codepoint(cps[b])) ++b;
  while (e > b && is_space_codepoint(cps[e - 1])) --e;
  std::string out;
  for (std::size_t i = b; i < e; ++i) out += from_codepoint(cps[i]);
  return out;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

} // namespace mlrecall::text
