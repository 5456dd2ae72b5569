// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "sbt/config.hpp"

using namespace sbt;

TEST(KeyValues, ParsesCommentsAndWhitespace) {
  const auto kv = KeyValues::parse("# header\n  width = 32 \n\nlr=1e-3 # trailing\r\nname=a b\n");
  EXPECT_EQ(kv.get("width"), "32");
  EXPECT_EQ(kv.get("lr"), "1e-3");
  EXPECT_EQ(kv.get("name"), "a b");
  EXPECT_FALSE(kv.get("missing").has_value());
  EXPECT_EQ(kv.entries().size(), 3u);
}

TEST(KeyValues, RejectsBrokenLines) {
  EXPECT_THROW(KeyValues::parse("width 32"), std::invalid_argument);
  EXPECT_THROW(KeyValues::parse("=3"), std::invalid_argument);
  EXPECT_THROW(KeyValues::load("/nonexistent/run.cfg"), std::runtime_error);
  auto kv = KeyValues::parse("a=1\nzz=2");
  EXPECT_NO_THROW(kv.reject_unknown({"a", "zz"}));
  try {
    kv.reject_unknown({"a"});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("zz"), std::string::npos);
  }
}

TEST(KeyValues, MergeAndSortedText) {
  auto base = KeyValues::parse("b=1\na=2");
  base.merge(KeyValues::parse("b=3\nc=4"));
  EXPECT_EQ(base.to_text(), "a=2\nb=3\nc=4\n");
  EXPECT_EQ(KeyValues::parse(base.to_text()).to_text(), base.to_text());
}

TEST(Parse, NumbersAndBools) {
  EXPECT_EQ(parse_double("k", "2.5e-3"), 2.5e-3);
  EXPECT_EQ(parse_int("k", "-7"), -7);
  EXPECT_EQ(parse_uint("k", "18446744073709551615"), std::numeric_limits<std::uint64_t>::max());
  EXPECT_TRUE(parse_bool("k", "true"));
  EXPECT_FALSE(parse_bool("k", "0"));
  for (const char* bad : {"", "1x", "abc", " 1"}) {
    EXPECT_THROW(parse_double("k", bad), std::invalid_argument) << bad;
    EXPECT_THROW(parse_int("k", bad), std::invalid_argument) << bad;
  }
  EXPECT_THROW(parse_uint("k", "-1"), std::invalid_argument);
  EXPECT_THROW(parse_int("k", "1.5"), std::invalid_argument);
  EXPECT_THROW(parse_bool("k", "yes"), std::invalid_argument);
  try {
    parse_uint("batch_size", "many");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
  }
}

TEST(Format, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1e-3), "0.001");
  EXPECT_EQ(format_float(0.1f), "0.1");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-30.0, 30.0);
  for (int i = 0; i < 2000; ++i) {
    const double d = std::ldexp(u(rng), static_cast<int>(u(rng)));
    EXPECT_EQ(parse_double("k", format_double(d)), d);
    const float f = static_cast<float>(d);
    EXPECT_EQ(static_cast<float>(parse_double("k", format_float(f))), f);
  }
}
