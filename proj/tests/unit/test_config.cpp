#include <gtest/gtest.h>

#include <cstdlib>

#include "dive/config.hpp"
#include "dive/error.hpp"

namespace dive {
namespace {

TEST(Config, ParsesSectionsCommentsAndWhitespace) {
  const Config c = Config::parse(
      "seed = 3   # top level\n"
      "\n"
      "[train]\n"
      "  lr=0.001\n"
      "iterations = 12\n"
      "[sample]\n"
      "guidance = night\n"
      "rps = yes\n");
  EXPECT_EQ(c.get_int("", "seed", 0), 3);
  EXPECT_DOUBLE_EQ(c.get_double("train", "lr", 0.0), 0.001);
  EXPECT_EQ(c.get_int("train", "iterations", 0), 12);
  EXPECT_EQ(c.get_string("sample", "guidance", ""), "night");
  EXPECT_TRUE(c.get_bool("sample", "rps", false));
  EXPECT_FALSE(c.has("sample", "lr"));
  EXPECT_EQ(c.get_int("sample", "steps", 30), 30);
}

TEST(Config, MalformedLinesAreConfigErrors) {
  for (const char* text : {"[train\n", "just words\n", " = 3\n"}) {
    try {
      Config::parse(text);
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig);
    }
  }
}

TEST(Config, TypedGettersRejectGarbage) {
  const Config c = Config::parse("[a]\nx = 1.5z\ny = 2.0\nb = maybe\n");
  EXPECT_THROW(c.get_double("a", "x", 0.0), Error);
  EXPECT_THROW(c.get_int("a", "y", 0), Error);
  EXPECT_THROW(c.get_bool("a", "b", false), Error);
}

TEST(Config, HashIgnoresOrderAndFormatting) {
  const Config a = Config::parse("[s]\nb = 2\na = 1\n[r]\nz=0\n");
  const Config b = Config::parse("# comment\n[r]\n z = 0\n[s]\na=1\nb=2\n");
  EXPECT_EQ(a.canonical(), b.canonical());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  EXPECT_NE(a.hash(), Config::parse("[s]\na = 1\nb = 3\n[r]\nz=0\n").hash());
}

TEST(Config, SetOverrides) {
  Config c = Config::parse("[t]\nk = 1\n");
  c.set("t", "k", "2");
  EXPECT_EQ(c.get_int("t", "k", 0), 2);
}

TEST(Config, MissingFileIsIoError) {
  try {
    Config::load("/nonexistent/dive.cfg");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}

TEST(DefaultSeed, ReadsEnvironment) {
  ::unsetenv("DIVE_SEED");
  EXPECT_EQ(default_seed(), 0u);
  ::setenv("DIVE_SEED", "1234", 1);
  EXPECT_EQ(default_seed(), 1234u);
  ::setenv("DIVE_SEED", "-5", 1);
  EXPECT_THROW(default_seed(), Error);
  ::setenv("DIVE_SEED", "12abc", 1);
  EXPECT_THROW(default_seed(), Error);
  ::unsetenv("DIVE_SEED");
}

}  // namespace
}  // namespace dive
