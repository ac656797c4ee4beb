#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace dupaudit::text {

// Word rule shared by keyword filtering and keyword counting:
//   * UTF-8 input; any code point that is not a letter or digit is a boundary
//     (ASCII punctuation, Unicode spaces, general punctuation, symbols, emoji);
//   * a possessive "'s" (straight or curly apostrophe) directly after a word
//     and before a boundary is dropped;
//   * with `case_fold`, letters are lowercased (ASCII, Latin-1, Latin
//     Extended-A, Greek, Cyrillic).
std::vector<std::string> split_words(std::string_view input, bool case_fold = true);

std::string fold_case(std::string_view input);

std::string_view trim(std::string_view s);

// True iff `needle` occurs as a contiguous run inside `haystack`.
// An empty needle never matches.
bool contains_sequence(const std::vector<std::string>& haystack,
                       const std::vector<std::string>& needle);

using StopwordSet = std::set<std::string, std::less<>>;

// Function words only (articles, pronouns, prepositions, conjunctions,
// auxiliaries). Content words such as "painting" or "art" are kept.
const StopwordSet& builtin_stopwords();

// One word per line; blank lines and lines starting with '#' are ignored.
// Entries go through the word rule, so "Van's" is stored as "van".
StopwordSet load_stopwords(const std::filesystem::path& path);

}  // namespace dupaudit::text
