#include <doctest.h>

#include <filesystem>
#include <random>

#include "expx/error.hpp"
#include "expx/pipeline.hpp"
#include "oracles.hpp"

using namespace expx;

TEST_CASE("an untrained model returns the source") {
  const auto model = make_model(7, 32);
  std::mt19937_64 rng(1);
  const auto src = oracle::random_image(rng, 40, 36), ref = oracle::random_image(rng, 24, 24);
  const auto out = correct(model, src, ref);
  CHECK(out.height == 40);
  CHECK(out.width == 36);
  double worst = 0;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    worst = std::max(worst, static_cast<double>(std::abs(out.pixels[i] - src.pixels[i])));
  CHECK(worst < 1e-6);
}

TEST_CASE("the reference only matters through its descriptor") {
  auto model = make_model(3, 32);
  oracle::perturb(model.modnet.params(), 4, 0.05);
  std::mt19937_64 rng(2);
  const auto src = oracle::random_image(rng, 32, 32);
  const auto r1 = oracle::random_image(rng, 32, 32);
  Image r2 = r1;
  for (auto& v : r2.pixels) v = std::min(1.0f, v * 0.3f + 0.6f);
  const auto a = correct(model, src, r1), b = correct(model, src, r2);
  CHECK(a.pixels != b.pixels);
  // Reference size is free.
  CHECK(correct(model, src, resize(r1, 48, 20)).height == 32);
  for (float v : a.pixels) CHECK((v >= 0 && v <= 1));
}

TEST_CASE("encoder descriptors") {
  const auto model = make_model(5, 32);
  std::mt19937_64 rng(3);
  const auto img = oracle::random_image(rng, 50, 50);
  const auto z = encode_image(model, img);
  CHECK(z.size() == 66);
  CHECK(encoder_view(model, img).height == 32);
  CHECK(encode_image(model, img) == z);
}

TEST_CASE("save and load preserve the forward pass") {
  auto model = make_model(9, 32);
  oracle::perturb(model.caee.params(), 1, 0.05);
  oracle::perturb(model.modnet.params(), 2, 0.05);
  const auto path = std::filesystem::temp_directory_path() / "expx_pipeline_test.expx";
  save_model(path, model);
  const auto back = load_model(path);
  CHECK(back.encoder_size() == 32);
  std::mt19937_64 rng(4);
  const auto src = oracle::random_image(rng, 24, 24), ref = oracle::random_image(rng, 24, 24);
  CHECK(correct(model, src, ref).pixels == correct(back, src, ref).pixels);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint sections are validated") {
  auto recs = model_records(make_model(1, 32));
  auto extra = recs;
  extra.push_back({"bogus.x", {1}, {0}});
  CHECK_THROWS_AS(model_from_records(extra), FormatError);
  auto state = recs;
  state.push_back(scalar_record("state.step", 3));
  CHECK_NOTHROW(model_from_records(state));
  auto dup = recs;
  dup.push_back({"caee.stray", {1}, {0}});
  CHECK_THROWS_AS(model_from_records(dup), FormatError);
  recs.pop_back();
  while (record_section(recs.back().name) != "modnet") recs.pop_back();
  recs.pop_back();
  CHECK_THROWS(model_from_records(recs));
}
