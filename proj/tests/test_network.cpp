#include <doctest.h>

#include <cmath>
#include <functional>

#include "test_support.hpp"
#include "threejoin/error.hpp"
#include "threejoin/network.hpp"

using namespace threejoin;
using namespace threejoin::testing;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.backbone.widths = {4, 6};
  c.retrieval_dim = 5;
  c.num_seen = 3;
  c.teacher_classes = 4;
  c.seed = 11;
  return c;
}

ImageBatch random_batch(Rng& rng, std::size_t n, int size, int channels) {
  std::vector<Raster> rs;
  for (std::size_t i = 0; i < n; ++i) rs.push_back(random_raster(rng, size, size, channels));
  return make_batch(rs, 3);
}

// Compares analytic parameter gradients with central differences on a
// random subset of coordinates; returns ||a - n|| / ||n||.
double gradient_error(ThreeStreamNetwork& net, const std::function<double()>& loss,
                      const std::function<void()>& backward, Rng& rng) {
  net.zero_grad();
  backward();
  std::vector<double> analytic, numeric;
  const double h = 1e-5;
  for (Param* p : net.params()) {
    for (int k = 0; k < 4; ++k) {
      const std::size_t i = rng.index(p->value.size());
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss();
      p->value[i] = keep - h;
      const double down = loss();
      p->value[i] = keep;
      numeric.push_back((up - down) / (2 * h));
      analytic.push_back(p->grad[i]);
    }
  }
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    ref += numeric[i] * numeric[i];
  }
  return std::sqrt(diff / std::max(ref, 1e-300));
}

}  // namespace

TEST_CASE("network gradients match finite differences for every stream") {
  Rng rng(3);
  ThreeStreamNetwork net(small_config());
  const ImageBatch images = random_batch(rng, 3, 12, 3);
  const ImageBatch sketches = random_batch(rng, 3, 12, 1);
  const Matrix r_ret = random_matrix(rng, 3, 5);
  const Matrix r_cls = random_matrix(rng, 3, 3);
  const Matrix r_kd = random_matrix(rng, 3, 4);

  SUBCASE("image") {
    auto loss = [&] {
      const auto o = net.forward_image(images, nullptr, false);
      return dot(o.retrieval, r_ret) + dot(o.class_logits, r_cls) + dot(o.student_logits, r_kd);
    };
    auto back = [&] {
      const auto o = net.forward_image(images, nullptr, true);
      net.backward_image(o, r_ret, r_cls, r_kd);
    };
    CHECK(gradient_error(net, loss, back, rng) < 1e-6);
  }
  SUBCASE("sketch") {
    auto loss = [&] {
      const auto o = net.forward_sketch(sketches, false);
      return dot(o.retrieval, r_ret) + dot(o.class_logits, r_cls);
    };
    auto back = [&] {
      const auto o = net.forward_sketch(sketches, true);
      net.backward_sketch(o, r_ret, r_cls);
    };
    CHECK(gradient_error(net, loss, back, rng) < 1e-6);
  }
  SUBCASE("edge") {
    auto loss = [&] { return dot(net.forward_edge(sketches, false).retrieval, r_ret); };
    auto back = [&] {
      const auto o = net.forward_edge(sketches, true);
      net.backward_edge(o, r_ret);
    };
    CHECK(gradient_error(net, loss, back, rng) < 1e-6);
  }
}

TEST_CASE("sketch and edge streams share one backbone") {
  Rng rng(5);
  ThreeStreamNetwork net(small_config());
  const ImageBatch b = random_batch(rng, 2, 12, 1);
  auto s = net.forward_sketch(b, false);
  auto e = net.forward_edge(b, false);
  CHECK(s.backbone_features.data == e.backbone_features.data);
  CHECK(s.retrieval.data != e.retrieval.data);

  net.encoders().sketch_edge_backbone.params().front()->value[0] += 0.3;
  const auto s2 = net.forward_sketch(b, false);
  const auto e2 = net.forward_edge(b, false);
  CHECK(s2.backbone_features.data == e2.backbone_features.data);
  CHECK(s2.backbone_features.data != s.backbone_features.data);
}

TEST_CASE("forward passes are shape-checked and deterministic") {
  Rng rng(7);
  ThreeStreamNetwork net(small_config());
  Raster r = random_raster(rng, 12, 12, 3);
  const ImageBatch dup = make_batch(std::vector<Raster>{r, r}, 3);
  const auto o = net.forward_image(dup, nullptr, false);
  CHECK(o.retrieval.rows == 2);
  CHECK(o.retrieval.cols == 5);
  CHECK(o.class_logits.cols == 3);
  for (std::size_t c = 0; c < o.retrieval.cols; ++c) CHECK(o.retrieval(0, c) == o.retrieval(1, c));

  CHECK_THROWS_AS(make_batch(std::vector<Raster>{}, 3), ShapeError);
  CHECK_THROWS_AS(make_batch(std::vector<Raster>{Raster(12, 12, 3), Raster(10, 12, 3)}, 3),
                  ShapeError);

  const ImageBatch white = make_batch(std::vector<Raster>{Raster(12, 12, 1, 255)}, 3);
  for (double v : net.forward_edge(white, false).retrieval.data) CHECK(std::isfinite(v));
}

TEST_CASE("checkpoints round-trip every tensor") {
  ThreeStreamNetwork a(small_config());
  auto cfg = small_config();
  cfg.seed = 99;
  ThreeStreamNetwork b(cfg);
  b.import_tensors(a.export_tensors());
  CHECK(b.export_tensors() == a.export_tensors());

  const auto dir = scratch_dir("ckpt");
  Checkpoint ck;
  ck.meta["x"] = 1;
  ck.tensors = a.export_tensors();
  save_checkpoint(dir / "a.ckpt", ck);
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.tensors == ck.tensors);
  CHECK(back.meta == ck.meta);
}
