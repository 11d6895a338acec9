#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "care/config.hpp"
#include "care/io.hpp"

using namespace care;

namespace {

std::string tmp_dir(const char* leaf) {
  auto d = std::filesystem::temp_directory_path() / leaf;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d.string();
}

}  // namespace

TEST_CASE("tensor dump bytes: magic, rank, extents, payload") {
  auto bytes = tensor_to_bytes({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE(bytes.size() == 4 + 4 + 2 * 4 + 6 * 4);
  CHECK(bytes[0] == 'C');
  CHECK(bytes[1] == 'A');
  CHECK(bytes[2] == 'R');
  CHECK(bytes[3] == 'E');
  // little-endian rank = 2
  CHECK(bytes[4] == 2);
  CHECK(bytes[5] == 0);
  // extents 2, 3
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 3);
  float first;
  std::memcpy(&first, bytes.data() + 16, 4);
  CHECK(first == 1.0f);

  auto [shape, data] = tensor_from_bytes(bytes);
  CHECK(shape == Shape{2, 3});
  CHECK(data == std::vector<float>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("tensor dump rejects corrupt input") {
  auto bytes = tensor_to_bytes({2, 2}, {1, 2, 3, 4});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(tensor_from_bytes(bad_magic), IoError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(tensor_from_bytes(truncated), IoError);
  CHECK_THROWS_AS(tensor_from_bytes({'C', 'A'}), IoError);
}

TEST_CASE("tensor dump file roundtrip") {
  auto dir = tmp_dir("care_io_test");
  auto path = dir + "/t.bin";
  dump_tensor(path, {1, 2, 2}, {0.5f, -1.5f, 2.5f, -3.5f});
  auto [shape, data] = load_tensor(path);
  CHECK(shape == Shape{1, 2, 2});
  CHECK(data == std::vector<float>{0.5f, -1.5f, 2.5f, -3.5f});
  CHECK_THROWS_AS(load_tensor(dir + "/missing.bin"), IoError);
}

TEST_CASE("checkpoint roundtrip preserves names, shapes, bytes") {
  auto dir = tmp_dir("care_ckpt_test");
  std::vector<NamedTensor> ts = {
      {"enc.w", {2, 3}, {1, 2, 3, 4, 5, 6}},
      {"enc.b", {3}, {0.1f, 0.2f, 0.3f}},
  };
  write_checkpoint(dir, ts);
  auto back = read_checkpoint(dir);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "enc.w");
  CHECK(back[0].shape == Shape{2, 3});
  CHECK(back[1].data == ts[1].data);
  CHECK_THROWS_AS(read_checkpoint(dir + "_missing"), IoError);
}

TEST_CASE("config defaults and derived sizes") {
  RunConfig c;
  CHECK(c.steps == 2000);
  CHECK(c.k_active == 3);
  CHECK(c.lambda_load == 0.01);
  CHECK(c.lambda_mask == 0.1);
  CHECK(c.lambda_mix == 0.05);
  CHECK(c.grid() == 8);
  CHECK(c.n_visual() == 64);
  CHECK(c.n_condition_tokens() == 4 + 3 * 64);
  c.validate();
}

TEST_CASE("config parsing: comments, whitespace, overrides") {
  auto c = parse_config_text(
      "# run setup\n"
      "seed = 42\n"
      "steps=100\n"
      "  lambda_mask = 0.25  \n"
      "\n"
      "variant = no_experts\n"
      "repaint_mode = literal\n"
      "freeze_backbone = true\n");
  CHECK(c.seed == 42);
  CHECK(c.steps == 100);
  CHECK(c.lambda_mask == 0.25);
  CHECK(c.variant == Variant::NoExperts);
  CHECK(c.repaint_mode == RepaintMode::Literal);
  CHECK(c.freeze_backbone);
}

TEST_CASE("config rejects unknown keys and bad values") {
  CHECK_THROWS_WITH_AS(parse_config_text("no_such_key=1\n"),
                       doctest::Contains("unknown key"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("steps=abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("steps=12x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("variant=bogus\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("steps\n"), ConfigError);
  RunConfig c;
  c.patch = 5;  // 32 % 5 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  RunConfig c2;
  c2.k_active = 9;
  CHECK_THROWS_AS(c2.validate(), ConfigError);
}

TEST_CASE("resolved text is deterministic and hash tracks content") {
  RunConfig a, b;
  CHECK(a.resolved_text() == b.resolved_text());
  CHECK(a.config_hash() == b.config_hash());
  b.set("steps", "123");
  CHECK(a.config_hash() != b.config_hash());
  CHECK(b.resolved_text().find("steps=123") != std::string::npos);
  // every key echoed
  CHECK(a.resolved_text().find("tau_start=2") != std::string::npos);
  CHECK(a.resolved_text().find("variant=full") != std::string::npos);
  // a resolved echo reparses to the same config
  auto round = parse_config_text(b.resolved_text());
  CHECK(round.config_hash() == b.config_hash());
}
