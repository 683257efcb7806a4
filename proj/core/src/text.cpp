#include "evaq/text.hpp"

namespace evaq::text {

bool utf8_decode(std::string_view in, std::vector<char32_t>& out) {
  out.clear();
  out.reserve(in.size());
  std::size_t i = 0;
  const std::size_t n = in.size();
  while (i < n) {
    const unsigned char b0 = static_cast<unsigned char>(in[i]);
    if (b0 < 0x80) {
      out.push_back(b0);
      ++i;
      continue;
    }
    int len;
    char32_t cp;
    if ((b0 & 0xe0) == 0xc0) {
      len = 2;
      cp = b0 & 0x1f;
    } else if ((b0 & 0xf0) == 0xe0) {
      len = 3;
      cp = b0 & 0x0f;
    } else if ((b0 & 0xf8) == 0xf0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      return false;
    }
    if (i + static_cast<std::size_t>(len) > n) return false;
    for (int k = 1; k < len; ++k) {
      const unsigned char b = static_cast<unsigned char>(in[i + static_cast<std::size_t>(k)]);
      if ((b & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (b & 0x3f);
    }
    // reject overlong encodings, surrogates and values past U+10FFFF
    if (len == 2 && cp < 0x80) return false;
    if (len == 3 && cp < 0x800) return false;
    if (len == 4 && cp < 0x10000) return false;
    if (cp >= 0xd800 && cp <= 0xdfff) return false;
    if (cp > 0x10ffff) return false;
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return true;
}

void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

std::string utf8_encode(const std::vector<char32_t>& cps) {
  std::string out;
  out.reserve(cps.size());
  for (char32_t cp : cps) utf8_append(out, cp);
  return out;
}

bool is_space(char32_t cp) {
  return cp == 0x20 || cp == 0x09 || cp == 0x0a || cp == 0x0d || cp == 0x0b ||
         cp == 0x0c || cp == 0xa0 || cp == 0x3000;
}

namespace {

char32_t fold_width(char32_t cp) {
  if (cp >= 0xff01 && cp <= 0xff5e) return cp - 0xfee0; // fullwidth ASCII block
  if (cp == 0x3000) return 0x20;                        // ideographic space
  if (cp == 0xa0) return 0x20;                          // no-break space
  return cp;
}

char32_t fold_case(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  // Latin-1 uppercase, skipping the multiplication sign
  if (cp >= 0xc0 && cp <= 0xde && cp != 0xd7) return cp + 0x20;
  return cp;
}

} // namespace

std::optional<std::string> normalize_query(std::string_view raw) {
  std::vector<char32_t> cps;
  if (!utf8_decode(raw, cps)) return std::nullopt;
  std::vector<char32_t> folded;
  folded.reserve(cps.size());
  for (char32_t cp : cps) folded.push_back(fold_case(fold_width(cp)));

  std::size_t b = 0, e = folded.size();
  while (b < e && is_space(folded[b])) ++b;
  while (e > b && is_space(folded[e - 1])) --e;
  return utf8_encode(std::vector<char32_t>(folded.begin() + static_cast<std::ptrdiff_t>(b),
                                           folded.begin() + static_cast<std::ptrdiff_t>(e)));
}

} // namespace evaq::text
