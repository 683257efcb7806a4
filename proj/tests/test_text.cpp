#include <doctest.h>

#include "evaq/text.hpp"

#include <string>
#include <vector>

using namespace evaq::text;

namespace {

std::vector<char32_t> decode_ok(std::string_view s) {
  std::vector<char32_t> cps;
  REQUIRE(utf8_decode(s, cps));
  return cps;
}

} // namespace

TEST_CASE("utf8 decode handles all sequence lengths") {
  auto cps = decode_ok("aé中\U0001f389"); // 1, 2, 3 and 4 byte forms
  REQUIRE(cps.size() == 4);
  CHECK(cps[0] == U'a');
  CHECK(cps[1] == 0xe9);
  CHECK(cps[2] == 0x4e2d);
  CHECK(cps[3] == 0x1f389);

  CHECK(decode_ok("").empty());
}

TEST_CASE("utf8 decode rejects malformed input") {
  std::vector<char32_t> cps;
  // lone continuation byte
  CHECK_FALSE(utf8_decode("\x80", cps));
  // invalid leading byte
  CHECK_FALSE(utf8_decode("\xff", cps));
  CHECK_FALSE(utf8_decode("\xf8\x88\x80\x80\x80", cps));
  // truncated sequences
  CHECK_FALSE(utf8_decode("\xc3", cps));
  CHECK_FALSE(utf8_decode("\xe4\xb8", cps));
  CHECK_FALSE(utf8_decode("abc\xf0\x9f\x8e", cps));
  // continuation byte with wrong high bits
  CHECK_FALSE(utf8_decode("\xc3\x41", cps));
  // overlong encodings of '/' and NUL
  CHECK_FALSE(utf8_decode("\xc0\xaf", cps));
  CHECK_FALSE(utf8_decode("\xc0\x80", cps));
  CHECK_FALSE(utf8_decode("\xe0\x80\xaf", cps));
  CHECK_FALSE(utf8_decode("\xf0\x80\x80\xaf", cps));
  // surrogate range U+D800..U+DFFF
  CHECK_FALSE(utf8_decode("\xed\xa0\x80", cps));
  CHECK_FALSE(utf8_decode("\xed\xbf\xbf", cps));
  // past U+10FFFF
  CHECK_FALSE(utf8_decode("\xf4\x90\x80\x80", cps));
}

TEST_CASE("utf8 encode round-trips decode") {
  const std::string samples[] = {
      "",
      "plain ascii",
      "café",
      "洪水 避難所",
      "mixed ß 中文 \U0001f30a end",
  };
  for (const auto& s : samples) {
    CAPTURE(s);
    auto cps = decode_ok(s);
    CHECK(utf8_encode(cps) == s);
  }

  // boundary codepoints survive an encode/decode cycle
  std::vector<char32_t> edges = {0x7f, 0x80, 0x7ff, 0x800, 0xffff, 0x10000, 0x10ffff};
  std::string enc = utf8_encode(edges);
  std::vector<char32_t> back;
  REQUIRE(utf8_decode(enc, back));
  CHECK(back == edges);
}

TEST_CASE("is_space covers ascii controls plus nbsp and ideographic space") {
  for (char32_t cp : {U' ', U'\t', U'\n', U'\r', char32_t(0x0b), char32_t(0x0c),
                      char32_t(0xa0), char32_t(0x3000)})
    CHECK(is_space(cp));
  for (char32_t cp : {U'a', U'0', char32_t(0x200b), char32_t(0x4e2d)})
    CHECK_FALSE(is_space(cp));
}

TEST_CASE("normalize_query folds width and case") {
  // fullwidth ASCII letters, digits and punctuation map onto the ASCII block
  CHECK(normalize_query("ＦＬＯＯＤ") == "flood");
  CHECK(normalize_query("１２３") == "123");
  CHECK(normalize_query("！～") == "!~");

  CHECK(normalize_query("FLOOD Warning") == "flood warning");

  // Latin-1 uppercase folds too; the multiplication sign stays put
  CHECK(normalize_query("ÀÞ") == "àþ");
  CHECK(normalize_query("3×4") == "3×4");

  // CJK text passes through untouched
  CHECK(normalize_query("洪水警報") == "洪水警報");
}

TEST_CASE("normalize_query trims but keeps interior spacing") {
  CHECK(normalize_query("  flood risk \t\n") == "flood risk");
  // ideographic space and nbsp count as whitespace at the edges...
  CHECK(normalize_query("　abc ") == "abc");
  // ...and fold to a plain space in the interior, without collapsing runs
  CHECK(normalize_query("a　b") == "a b");
  CHECK(normalize_query("a  b") == "a  b");
}

TEST_CASE("normalize_query edge cases") {
  auto empty = normalize_query("");
  REQUIRE(empty.has_value());
  CHECK(empty->empty());

  auto spaces = normalize_query(" 　\t ");
  REQUIRE(spaces.has_value());
  CHECK(spaces->empty());

  CHECK_FALSE(normalize_query("abc\xc3").has_value());
  CHECK_FALSE(normalize_query("\xed\xa0\x80").has_value());
}
