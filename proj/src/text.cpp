#include "dupaudit/text.hpp"

#include <algorithm>
#include <fstream>

#include "dupaudit/errors.hpp"

namespace dupaudit::text {
namespace {

constexpr char32_t kInvalid = 0xFFFD;

struct Decoded {
  char32_t cp;
  std::size_t len;
};

Decoded decode_one(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) return {b0, 1};
  std::size_t len = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return {kInvalid, 1};
  }
  if (i + len > s.size()) return {kInvalid, 1};
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return {kInvalid, 1};
    cp = (cp << 6) | (b & 0x3F);
  }
  // Overlong encodings and surrogates are treated as invalid.
  if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
      (len == 4 && (cp < 0x10000 || cp > 0x10FFFF)) ||
      (cp >= 0xD800 && cp <= 0xDFFF)) {
    return {kInvalid, 1};
  }
  return {cp, len};
}

void encode_one(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool in(char32_t cp, char32_t lo, char32_t hi) { return cp >= lo && cp <= hi; }

bool is_word_char(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') ||
           (cp >= 'A' && cp <= 'Z');
  }
  if (cp == kInvalid) return false;
  if (in(cp, 0x80, 0xBF)) return cp == 0xAA || cp == 0xB5 || cp == 0xBA;
  if (cp == 0xD7 || cp == 0xF7) return false;
  if (in(cp, 0x2000, 0x206F) || in(cp, 0x20A0, 0x20CF) ||
      in(cp, 0x2100, 0x2BFF) || in(cp, 0x3000, 0x303F) ||
      in(cp, 0xFE30, 0xFE4F) || in(cp, 0xFF00, 0xFF0F) ||
      in(cp, 0xFF1A, 0xFF20) || in(cp, 0xFF3B, 0xFF40) ||
      in(cp, 0xFF5B, 0xFF65) || in(cp, 0x1F000, 0x1FAFF) ||
      in(cp, 0xFE00, 0xFE0F) || cp == 0xFEFF) {
    return false;
  }
  return true;
}

char32_t lower(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp < 0xC0) return cp;
  if (in(cp, 0xC0, 0xDE) && cp != 0xD7) return cp + 0x20;
  if (in(cp, 0x100, 0x137) || in(cp, 0x14A, 0x177)) return cp | 1;
  if (in(cp, 0x139, 0x148) || in(cp, 0x179, 0x17E)) {
    return (cp & 1) ? cp + 1 : cp;
  }
  if (cp == 0x178) return 0xFF;
  if (in(cp, 0x391, 0x3A9) && cp != 0x3A2) return cp + 0x20;
  if (in(cp, 0x410, 0x42F)) return cp + 0x20;
  if (in(cp, 0x400, 0x40F)) return cp + 0x50;
  return cp;
}

bool is_apostrophe(char32_t cp) { return cp == U'\'' || cp == 0x2019; }

}  // namespace

std::vector<std::string> split_words(std::string_view input, bool case_fold) {
  std::vector<std::string> words;
  std::string current;
  std::size_t i = 0;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  while (i < input.size()) {
    const auto [cp, len] = decode_one(input, i);
    if (is_word_char(cp)) {
      encode_one(case_fold ? lower(cp) : cp, current);
      i += len;
      continue;
    }
    if (is_apostrophe(cp) && !current.empty()) {
      const std::size_t j = i + len;
      if (j < input.size() && (input[j] == 's' || input[j] == 'S')) {
        const std::size_t k = j + 1;
        if (k >= input.size() || !is_word_char(decode_one(input, k).cp)) {
          flush();
          i = k;
          continue;
        }
      }
    }
    flush();
    i += len;
  }
  flush();
  return words;
}

std::string fold_case(std::string_view input) {
  std::string out;
  out.reserve(input.size());
  std::size_t i = 0;
  while (i < input.size()) {
    const auto [cp, len] = decode_one(input, i);
    if (cp == kInvalid) {
      out.append(input.substr(i, len));
    } else {
      encode_one(lower(cp), out);
    }
    i += len;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  constexpr std::string_view kSpace = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(kSpace);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(kSpace);
  return s.substr(b, e - b + 1);
}

bool contains_sequence(const std::vector<std::string>& haystack,
                       const std::vector<std::string>& needle) {
  if (needle.empty()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(),
                     needle.end()) != haystack.end();
}

const StopwordSet& builtin_stopwords() {
  static const StopwordSet kWords = {
      "a",     "about", "above", "after", "again", "against", "all",   "am",
      "an",    "and",   "any",   "are",   "as",    "at",      "be",    "because",
      "been",  "before", "being", "below", "between", "both",  "but",   "by",
      "can",   "could", "did",   "do",    "does",  "doing",   "down",  "during",
      "each",  "few",   "for",   "from",  "further", "had",   "has",   "have",
      "having", "he",   "her",   "here",  "hers",  "herself", "him",   "himself",
      "his",   "how",   "i",     "if",    "in",    "into",    "is",    "it",
      "its",   "itself", "me",   "more",  "most",  "my",      "myself", "no",
      "nor",   "not",   "of",    "off",   "on",    "once",    "only",  "or",
      "other", "our",   "ours",  "ourselves", "out", "over",  "own",   "same",
      "she",   "should", "so",   "some",  "such",  "than",    "that",  "the",
      "their", "theirs", "them", "themselves", "then", "there", "these", "they",
      "this",  "those", "through", "to",  "too",   "under",   "until", "up",
      "very",  "was",   "we",    "were",  "what",  "when",    "where", "which",
      "while", "who",   "whom",  "why",   "will",  "with",    "would", "you",
      "your",  "yours", "yourself", "yourselves",
  };
  return kWords;
}

StopwordSet load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read stopword file " + path.string());
  StopwordSet words;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    for (auto& w : split_words(t)) words.insert(std::move(w));
  }
  return words;
}

}  // namespace dupaudit::text
