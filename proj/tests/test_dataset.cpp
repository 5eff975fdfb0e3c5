#include <doctest.h>

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "test_support.hpp"
#include "threejoin/dataset.hpp"
#include "threejoin/error.hpp"

using namespace threejoin;
using namespace threejoin::testing;
namespace fs = std::filesystem;

namespace {

struct ManifestWriter {
  fs::path dir;
  std::ofstream out;

  ManifestWriter(const fs::path& d, const std::vector<std::string>& seen,
                 const std::vector<std::string>& unseen)
      : dir(d), out(d / "manifest.jsonl") {
    write_png(dir / "pixel.png", Raster(4, 4, 1, 200));
    out << nlohmann::json{{"seen", seen}, {"unseen", unseen}}.dump() << "\n";
  }
  void record(const std::string& id, const std::string& modality, const std::string& cls,
              const std::string& path = "pixel.png") {
    out << nlohmann::json{{"id", id}, {"modality", modality}, {"class", cls}, {"path", path}}.dump()
        << "\n";
  }
  fs::path close() {
    out.close();
    return dir / "manifest.jsonl";
  }
};

std::vector<std::string> names(const std::string& prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

}  // namespace

TEST_CASE("label space") {
  const LabelSpace ls({"a", "b", "c", "d"}, {true, false, true, true});
  CHECK(ls.num_seen() == 3);
  CHECK(ls.seen_classes() == std::vector<int>{0, 2, 3});
  CHECK(ls.unseen_classes() == std::vector<int>{1});
  CHECK(ls.seen_rank(2) == 1);
  CHECK(ls.seen_rank(3) == 2);
  CHECK_THROWS_AS(ls.seen_rank(1), ValidationError);
  CHECK_THROWS_AS(ls.seen_rank(9), ValidationError);
  CHECK(ls.find("c") == 2);
  CHECK_FALSE(ls.find("zebra").has_value());
  CHECK_THROWS_AS(LabelSpace({"a", "a"}, {true, false}), ValidationError);
  CHECK_THROWS_AS(LabelSpace({"a", "b"}, {true}), ValidationError);
  CHECK(parse_ingest_modality("sketch") == Modality::sketch);
  CHECK_THROWS_AS(parse_ingest_modality("edge"), ValidationError);
}

TEST_CASE("manifest loading") {
  const fs::path dir = scratch_dir("manifest");

  SUBCASE("hundred seen and twenty five unseen") {
    const auto seen = names("s", 100), unseen = names("u", 25);
    ManifestWriter m(dir, seen, unseen);
    m.record("img0", "image", "s0");
    m.record("skt0", "sketch", "s3");
    m.record("img1", "image", "u4");
    m.record("skt1", "sketch", "u7");
    const ZeroShotSplit split = load_manifest(m.close());
    CHECK(split.label_space.num_seen() == 100);
    CHECK(split.label_space.unseen_classes().size() == 25);
    CHECK(split.train_images.size() == 1);
    CHECK(split.train_sketches.size() == 1);
    CHECK(split.test_images.size() == 1);
    CHECK(split.test_sketches.size() == 1);
    CHECK(split.test_sketches[0].class_label == *split.label_space.find("u7"));
    CHECK(split.train_images[0].path == dir / "pixel.png");
    CHECK(split.train_images[0].load().height == 4);
  }
  SUBCASE("no train sketches is valid") {
    ManifestWriter m(dir, {"a", "b"}, {"c"});
    m.record("i0", "image", "a");
    m.record("i1", "image", "c");
    const ZeroShotSplit split = load_manifest(m.close());
    CHECK(split.train_sketches.empty());
    CHECK_NOTHROW(split.validate());
  }
  SUBCASE("class both seen and unseen") {
    ManifestWriter m(dir, {"cat", "dog"}, {"cat"});
    CHECK_THROWS_AS(load_manifest(m.close()), ValidationError);
  }
  SUBCASE("unknown modality") {
    ManifestWriter m(dir, {"a", "b"}, {"c"});
    m.record("e0", "edge", "a");
    CHECK_THROWS_AS(load_manifest(m.close()), ValidationError);
  }
  SUBCASE("missing manifest names the path") {
    try {
      load_manifest(dir / "nowhere.jsonl");
      FAIL("expected an I/O error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("nowhere.jsonl") != std::string::npos);
    }
  }
  SUBCASE("missing raster") {
    ManifestWriter m(dir, {"a", "b"}, {"c"});
    m.record("i0", "image", "a", "gone.png");
    CHECK_THROWS_AS(load_manifest(m.close()), IoError);
  }
  SUBCASE("write and reload") {
    ManifestWriter m(dir, {"a", "b"}, {"c"});
    m.record("i0", "image", "a");
    m.record("s0", "sketch", "b");
    m.record("i1", "image", "c");
    const ZeroShotSplit split = load_manifest(m.close());
    write_manifest(dir / "copy.jsonl", split);
    const ZeroShotSplit again = load_manifest(dir / "copy.jsonl");
    CHECK(again.label_space == split.label_space);
    CHECK(again.train_images[0].id == "i0");
    CHECK(again.test_images[0].id == "i1");
  }
}

TEST_CASE("split validation") {
  ZeroShotSplit split;
  split.label_space = LabelSpace({"a", "b", "c"}, {true, true, false});
  Sample s;
  s.id = "x";
  s.class_label = 2;
  split.train_images.push_back(s);
  CHECK_THROWS_AS(split.validate(), ValidationError);
  split.train_images[0].class_label = 0;
  split.test_images.push_back(s);
  CHECK_THROWS_AS(split.validate(), ValidationError);
  split.test_images[0].id = "y";
  CHECK_NOTHROW(split.validate());
}

TEST_CASE("synthetic corpus") {
  const fs::path root = scratch_dir("synthetic");
  SyntheticCorpusConfig config;
  config.num_classes = 8;
  config.images_per_class = 40;
  config.sketches_per_class = 40;
  config.image_size = 64;
  config.seed = 7;
  const ZeroShotSplit split = generate_synthetic_corpus(config, root);

  CHECK(split.label_space.num_seen() == 6);
  CHECK(split.label_space.unseen_classes().size() == 2);
  CHECK(split.train_images.size() + split.test_images.size() == 320);
  CHECK(split.train_sketches.size() + split.test_sketches.size() == 320);
  CHECK(split.train_images.size() == 240);

  std::size_t pngs = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().extension() == ".png") ++pngs;
  }
  CHECK(pngs == 640);

  const auto seen_list = split.label_space.seen_classes();
  const std::set<int> seen(seen_list.begin(), seen_list.end());
  for (int u : split.label_space.unseen_classes()) CHECK_FALSE(seen.contains(u));

  const ZeroShotSplit loaded = load_manifest(root / "manifest.jsonl");
  CHECK(loaded.label_space == split.label_space);
  CHECK(loaded.test_sketches.size() == split.test_sketches.size());

  const Raster img = split.train_images[0].load();
  CHECK(img.channels == 3);
  CHECK(img.height == 64);
  CHECK(split.train_sketches[0].load().channels == 1);

  const fs::path again = scratch_dir("synthetic_again");
  const ZeroShotSplit second = generate_synthetic_corpus(config, again);
  for (std::size_t i = 0; i < split.train_images.size(); i += 37) {
    CHECK(split.train_images[i].load() == second.train_images[i].load());
    CHECK(split.train_sketches[i].load() == second.train_sketches[i].load());
  }

  config.num_classes = 2;
  CHECK_THROWS_AS(generate_synthetic_corpus(config, again), ValidationError);
}

TEST_CASE("class balanced batches") {
  ZeroShotSplit split;
  split.label_space = LabelSpace(names("c", 10), {true, true, true, true, true, true, true, true,
                                                  false, false});
  for (int c = 0; c < 8; ++c) {
    for (int k = 0; k < 5; ++k) {
      Sample s;
      s.class_label = c;
      s.id = "i" + std::to_string(c) + "_" + std::to_string(k);
      split.train_images.push_back(s);
      s.modality = Modality::sketch;
      s.id = "s" + std::to_string(c) + "_" + std::to_string(k);
      split.train_sketches.push_back(s);
    }
  }

  const BatchSpec spec{24, 8, 1};
  const auto batch = sample_batch(split, spec, 0);
  REQUIRE(batch.size() == 24);
  std::map<int, int> per_class;
  for (const auto& p : batch) {
    CHECK(p.image.class_label == p.sketch.class_label);
    CHECK(p.sketch.modality == Modality::sketch);
    ++per_class[p.image.class_label];
  }
  CHECK(per_class.size() == 8);
  for (const auto& [c, n] : per_class) CHECK(n == 3);

  const auto same = sample_batch(split, spec, 0);
  const auto other = sample_batch(split, spec, 1);
  bool differs = false;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(same[i].image.id == batch[i].image.id);
    CHECK(same[i].sketch.id == batch[i].sketch.id);
    differs = differs || other[i].image.id != batch[i].image.id;
  }
  CHECK(differs);

  for (std::int64_t step = 0; step < 50; ++step) {
    const auto b = sample_batch(split, BatchSpec{6, 2, 5}, step);
    std::set<int> labels;
    for (const auto& p : b) labels.insert(p.image.class_label);
    CHECK(labels.size() == 2);
  }

  CHECK_THROWS_AS(sample_batch(split, BatchSpec{25, 8, 1}, 0), ValidationError);

  ZeroShotSplit single = split;
  std::erase_if(single.train_images, [](const Sample& s) { return s.class_label != 0; });
  CHECK_THROWS_AS(sample_batch(single, BatchSpec{4, 2, 1}, 0), SamplingError);
}
