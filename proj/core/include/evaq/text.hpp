#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace evaq::text {

/// Decode UTF-8 into codepoints. Returns false on malformed input
/// (overlong forms, surrogates, truncated sequences, out of range).
bool utf8_decode(std::string_view in, std::vector<char32_t>& out);

void utf8_append(std::string& out, char32_t cp);

std::string utf8_encode(const std::vector<char32_t>& cps);

bool is_space(char32_t cp);

/// Canonical query form: width compatibility folding (fullwidth ASCII and
/// the ideographic space to their ASCII counterparts), simple lowercasing
/// (ASCII plus Latin-1) and whitespace trimmed at both ends. Returns
/// nullopt for malformed UTF-8; the result may be empty, which callers
/// treat as a skippable record.
std::optional<std::string> normalize_query(std::string_view raw);

} // namespace evaq::text
