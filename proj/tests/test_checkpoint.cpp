#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "oat/checkpoint.hpp"
#include "oat/errors.hpp"

using namespace oat;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / ("oat_ckpt_" + stem + ".bin");
}

void corrupt_byte(const fs::path& p, size_t at, char value) {
  std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(static_cast<std::streamoff>(at));
  f.write(&value, 1);
}

}  // namespace

TEST_CASE("entries survive a write and read round trip") {
  std::vector<CheckpointEntry> in;
  in.push_back({"alpha", {3}, {1.0, -2.5, 3e300}});
  in.push_back({"beta/gamma.w", {2, 3}, {0, 1, 2, 3, 4, 5}});
  in.push_back({"rank3", {2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}});
  const auto p = temp_file("roundtrip");
  write_checkpoint(p.string(), in);
  const auto out = read_checkpoint(p.string());
  REQUIRE(out.size() == in.size());
  for (size_t i = 0; i < in.size(); ++i) {
    CHECK(out[i].name == in[i].name);
    CHECK(out[i].extents == in[i].extents);
    CHECK(out[i].values == in[i].values);
  }
  fs::remove(p);
}

TEST_CASE("malformed files are rejected with a byte offset") {
  std::vector<CheckpointEntry> in = {{"w", {2, 2}, {1, 2, 3, 4}}};
  const auto p = temp_file("corrupt");
  write_checkpoint(p.string(), in);

  SUBCASE("bad magic") {
    corrupt_byte(p, 0, 'X');
    CHECK_THROWS_WITH_AS(read_checkpoint(p.string()),
                         doctest::Contains("byte 0"), DataError);
  }
  SUBCASE("bad version") {
    corrupt_byte(p, 4, 9);
    CHECK_THROWS_WITH_AS(read_checkpoint(p.string()),
                         doctest::Contains("byte 4"), DataError);
  }
  SUBCASE("truncated values") {
    fs::resize_file(p, fs::file_size(p) - 5);
    CHECK_THROWS_WITH_AS(read_checkpoint(p.string()),
                         doctest::Contains("truncated"), DataError);
  }
  SUBCASE("zero extent") {
    // extents start after magic(4) version(4) namelen(2) name(1) rank(1)
    corrupt_byte(p, 12, 0);
    CHECK_THROWS_AS(read_checkpoint(p.string()), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_checkpoint((p.string() + ".nope")), DataError);
  }
  fs::remove(p);
}

TEST_CASE("unwritable destinations are rejected") {
  CHECK_THROWS_AS(write_checkpoint("/nonexistent_dir/x.bin", {}), DataError);
}

TEST_CASE("param snapshots restore by name into any store") {
  ParamStore a;
  a.add("m.w", 2, 3, {1, 2, 3, 4, 5, 6});
  a.add("m.b", 1, 3, {-1, -2, -3});
  const auto p = temp_file("params");
  write_checkpoint(p.string(), snapshot_params(a));
  const auto entries = read_checkpoint(p.string());

  ParamStore fresh;
  auto ids = restore_params(fresh, entries);
  REQUIRE(ids.size() == 2);
  CHECK(fresh.count() == 2);
  CHECK(fresh.values(fresh.find("m.w")) == a.values(0));
  CHECK(fresh.values(fresh.find("m.b")) == a.values(1));

  // overwrite path: same shapes, new values land in place
  ParamStore same;
  same.add("m.w", 2, 3, std::vector<double>(6, 0.0));
  same.add("m.b", 1, 3, std::vector<double>(3, 0.0));
  restore_params(same, entries);
  CHECK(same.values(0) == a.values(0));

  // shape mismatch is a data error, not a silent resize
  ParamStore wrong;
  wrong.add("m.w", 3, 2, std::vector<double>(6, 0.0));
  CHECK_THROWS_AS(restore_params(wrong, entries), DataError);

  // reserved names never become parameters
  auto with_reserved = entries;
  with_reserved.push_back({"__step__", {1}, {42.0}});
  ParamStore skip;
  restore_params(skip, with_reserved);
  CHECK(skip.find("__step__") == -1);
  fs::remove(p);
}

TEST_CASE("training state restores step, moments, and config text") {
  ParamStore ps;
  Rng rng(7);
  ps.add("a.w", 2, 2, {0.1, 0.2, 0.3, 0.4});
  ps.add("a.b", 1, 2, {0.0, 0.0});
  Adam opt(ps, {});
  for (int s = 0; s < 3; ++s) {
    std::unordered_map<int, std::vector<double>> g;
    g[0] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
            rng.uniform(-1, 1)};
    g[1] = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    opt.step(g);
  }
  const std::string cfg = "steps=100\nseed=3\ncore=transformer-slot-lstm\n";
  const auto p = temp_file("state");
  save_training_state(p.string(), ps, opt, cfg);

  ParamStore ps2;
  Adam opt2(ps2, {});
  TrainingState st = load_training_state(p.string(), ps2, &opt2);
  CHECK(st.step == 3);
  CHECK(st.config_text == cfg);
  CHECK(opt2.steps_done() == 3);
  REQUIRE(ps2.count() == 2);
  for (int i = 0; i < 2; ++i) {
    const int j = ps2.find(ps.name(i));
    REQUIRE(j >= 0);
    CHECK(ps2.values(j) == ps.values(i));
    CHECK(opt2.m(j) == opt.m(i));
    CHECK(opt2.v(j) == opt.v(i));
  }
  fs::remove(p);
}

TEST_CASE("saving over an existing checkpoint replaces it atomically") {
  const auto p = temp_file("atomic");
  write_checkpoint(p.string(), {{"x", {1}, {1.0}}});
  write_checkpoint(p.string(), {{"x", {1}, {2.0}}});
  const auto out = read_checkpoint(p.string());
  REQUIRE(out.size() == 1);
  CHECK(out[0].values[0] == 2.0);
  CHECK_FALSE(fs::exists(p.string() + ".tmp"));
  fs::remove(p);
}
