#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "roidiff/archive.hpp"
#include "roidiff/config.hpp"
#include "roidiff/errors.hpp"
#include "roidiff/rng.hpp"
#include "roidiff/session_io.hpp"

using namespace roidiff;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "roidiff_io_test";
  fs::create_directories(d);
  return d;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}
}  // namespace

TEST_CASE("tensor archive round trip is bitwise") {
  auto dir = temp_dir();
  TensorArchive a;
  Rng rng(5);
  Tensor t1({3, 4});
  Tensor t2({7});
  rng.fill_normal(t1.data(), t1.numel());
  rng.fill_normal(t2.data(), t2.numel());
  a.put("alpha", t1);
  a.put("beta", t2);
  a.config["note"] = "unit";
  a.config["nested"] = {{"k", 3}};

  auto p1 = dir / "a1.rta";
  auto p2 = dir / "a2.rta";
  a.save(p1);
  TensorArchive b = TensorArchive::load(p1);
  b.save(p2);
  CHECK(read_bytes(p1) == read_bytes(p2));  // save -> load -> save idempotent

  CHECK(b.names() == std::vector<std::string>{"alpha", "beta"});
  CHECK(std::memcmp(b.get("alpha").data(), t1.data(), sizeof(float) * t1.numel()) == 0);
  CHECK(std::memcmp(b.get("beta").data(), t2.data(), sizeof(float) * t2.numel()) == 0);
  CHECK(b.config.at("note") == "unit");
  CHECK_THROWS_AS(b.get("gamma"), CheckpointError);
}

TEST_CASE("tensor archive rejects corruption") {
  auto dir = temp_dir();
  TensorArchive a;
  a.put("x", Tensor({2, 2}, {1, 2, 3, 4}));
  auto p = dir / "bad.rta";
  a.save(p);

  SUBCASE("bad magic") {
    std::string bytes = read_bytes(p);
    bytes[0] = 'X';
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(TensorArchive::load(p), CheckpointError);
  }
  SUBCASE("unknown version") {
    std::string bytes = read_bytes(p);
    bytes[4] = 99;
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(TensorArchive::load(p), CheckpointError);
  }
  SUBCASE("truncated blob") {
    std::string bytes = read_bytes(p);
    bytes.resize(bytes.size() - 5);
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(TensorArchive::load(p), CheckpointError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(TensorArchive::load(dir / "nope.rta"), CheckpointError); }
}

TEST_CASE("rts1 round trip and corruption") {
  auto dir = temp_dir();
  Rng rng(9);
  Tensor x({5, 11});
  rng.fill_normal(x.data(), x.numel());
  auto p = dir / "s.rts1";
  write_rts1(p, x);
  Tensor y = read_rts1(p);
  CHECK(y.shape() == x.shape());
  CHECK(std::memcmp(y.data(), x.data(), sizeof(float) * x.numel()) == 0);

  std::string bytes = read_bytes(p);
  bytes[2] = 'Z';
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), bytes.size());
  CHECK_THROWS_AS(read_rts1(p), CheckpointError);
}

TEST_CASE("manifest json-lines round trip with null fields") {
  auto dir = temp_dir();
  std::vector<ManifestEntry> rows(2);
  rows[0].session_id = "s1";
  rows[0].path = "sessions/s1.rts1";
  rows[0].state = "rest";
  rows[0].age = 41.5f;
  rows[0].sex = 1;
  rows[0].diagnosis = "case";
  rows[1].session_id = "s2";
  rows[1].path = "sessions/s2.rts1";
  rows[1].state = "sleep";

  auto p = dir / "manifest.jsonl";
  write_manifest(p, rows);
  auto back = read_manifest(p);
  REQUIRE(back.size() == 2);
  CHECK(back[0].age == doctest::Approx(41.5f));
  CHECK(back[0].sex == 1);
  CHECK(back[0].diagnosis == "case");
  CHECK(!back[1].age);
  CHECK(!back[1].sex);
  CHECK(!back[1].diagnosis);

  MetadataRecord rec = to_record(back[0], {"case", "control"});
  CHECK(rec.diagnosis == 0);
  CHECK_THROWS_AS(to_record(back[0], {"control", "other"}), ConfigError);
}

TEST_CASE("window_stream arithmetic") {
  Tensor session({3, 100});
  for (size_t i = 0; i < session.numel(); ++i) session.data()[i] = static_cast<float>(i);

  CHECK(window_stream(Tensor({3, 40}), 40, 40).size() == 1);
  auto w40 = window_stream(session, 40, 40);
  REQUIRE(w40.size() == 2);  // [0,40) and [40,80); the partial tail is dropped
  CHECK(w40[0].at({0, 0}) == 0.0f);
  CHECK(w40[1].at({0, 0}) == 40.0f);

  auto w20 = window_stream(session, 40, 20);
  REQUIRE(w20.size() == 4);  // offsets 0,20,40,60
  for (int k = 0; k < 4; ++k) CHECK(w20[k].at({0, 0}) == 20.0f * k);

  CHECK_THROWS_AS(window_stream(session, 101, 1), std::invalid_argument);
}

TEST_CASE("kv config parsing") {
  KvConfig cfg = KvConfig::parse_string(
      "n_rois = 64\n"
      "lr = 1e-4   # comment\n"
      "name = run a\n"
      "flag = true\n");
  CHECK(cfg.get_int("n_rois", 0) == 64);
  CHECK(cfg.get_double("lr", 0.0) == doctest::Approx(1e-4));
  CHECK(cfg.get_string("name", "") == "run a");
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_int("absent", 7) == 7);
  CHECK_NOTHROW(cfg.finish());

  KvConfig bad = KvConfig::parse_string("n_rois = 64\ntypo_key = 3\n");
  bad.get_int("n_rois", 0);
  CHECK_THROWS_AS(bad.finish(), ConfigError);
  CHECK_THROWS_AS(KvConfig::parse_string("just text\n"), ConfigError);
  CHECK_THROWS_AS(KvConfig::parse_string("a = 1\na = 2\n"), ConfigError);
  KvConfig notnum = KvConfig::parse_string("x = abc\n");
  CHECK_THROWS_AS(notnum.get_int("x", 0), ConfigError);
}
