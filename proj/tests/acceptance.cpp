// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "expx/caee.hpp"
#include "expx/kernels.hpp"
#include "expx/losses.hpp"
#include "expx/metrics.hpp"
#include "expx/modnet.hpp"
#include "expx/photometric.hpp"
#include "expx/pipeline.hpp"
#include "expx/trainer.hpp"
#include "oracles.hpp"

using namespace expx;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

using Rows = std::vector<std::vector<double>>;

TensorD from_rows(const Rows& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return TensorD({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows[0].size())}, v);
}

Rows random_rows(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  Rows r;
  for (std::size_t i = 0; i < n; ++i) r.push_back(oracle::random_vec(rng, d));
  return r;
}

Rows unit_rows(Rows r) {
  for (auto& v : r) {
    double n = 0;
    for (double x : v) n += x * x;
    for (auto& x : v) x /= std::sqrt(n);
  }
  return r;
}

TensorD batch(std::mt19937_64& rng, int n, std::int64_t size) {
  std::vector<Image> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(oracle::random_image(rng, size, size));
  return to_tensor<double>(std::span<const Image>(imgs));
}

double luma_mean(const Image& img) { return stat_vector(to_gray(img)).mu; }

// A1
void statistical_oracles(Outcome& o) {
  std::mt19937_64 rng(101);
  double worst_moment = 0, worst_sobel = 0, worst_psnr = 0, worst_ssim = 0;
  int dc_mismatch = 0;
  for (int t = 0; t < 200; ++t) {
    const auto h = 11 + static_cast<std::int64_t>(rng() % 22), w = 11 + static_cast<std::int64_t>(rng() % 22);
    const auto a = oracle::random_image(rng, h, w), b = oracle::random_image(rng, h, w);

    const auto g = to_gray(a);
    const auto s = stat_vector(g);
    const auto m = oracle::moments(oracle::gray(a));
    for (auto [x, y] : {std::pair{s.mu, m.mu}, {s.sigma, m.sigma}, {s.skew, m.skew}, {s.kurt, m.kurt},
                        {s.p_under, m.p_under}, {s.p_over, m.p_over}})
      worst_moment = std::max(worst_moment, std::abs(x - static_cast<double>(y)));

    const auto sob = sobel(g);
    const auto ref = oracle::sobel(g.pixels, h, w);
    for (std::size_t i = 0; i < ref.size(); ++i)
      worst_sobel = std::max(worst_sobel, std::abs(sob.magnitude[i] - ref[i]) / std::max(1.0, ref[i]));

    if (dark_channel(a).values != oracle::dark_channel(a)) ++dc_mismatch;
    worst_psnr = std::max(worst_psnr, std::abs(psnr(a, b) - oracle::psnr(a, b)));
    worst_ssim = std::max(worst_ssim, std::abs(ssim(a, b) - oracle::ssim(a, b)));
  }
  o.detail << "moments " << worst_moment << ", sobel " << worst_sobel << ", dark-channel mismatches "
           << dc_mismatch << ", psnr " << worst_psnr << " dB, ssim " << worst_ssim;
  o.require(worst_moment <= 1e-10, "moments within 1e-10");
  o.require(worst_sobel <= 1e-5, "sobel within 1e-5");
  o.require(dc_mismatch == 0, "dark channel exact");
  o.require(worst_psnr <= 1e-6, "psnr within 1e-6 dB");
  o.require(worst_ssim <= 1e-6, "ssim within 1e-6");
}

// A2
void gradient_suite(Outcome& o) {
  constexpr int kSamples = 24;
  std::mt19937_64 rng(202);
  auto run = [&](const char* name, const std::function<TensorD()>& loss, std::vector<TensorD> params,
                 std::uint64_t seed) {
    const auto r = oracle::finite_difference(loss, std::move(params), kSamples, seed);
    o.detail << name << " " << r.checked - r.failed << "/" << r.checked << " (worst " << r.worst
             << ", redrawn " << r.straddled << "); ";
    o.require(r.checked >= 20 && r.failed == 0, name);
  };

  Encoder<double> enc;
  oracle::perturb(enc.params(), 1, 0.05);
  enc.attention().gamma.mutable_data()[0] = 0.5;
  ModNet<double> net;
  oracle::perturb(net.params(), 2, 0.05);

  const auto x2 = batch(rng, 2, 16);
  TensorD zproj({2, 66}, oracle::random_vec(rng, 132));
  run("caee.encode", [&] { return ops::sum(ops::mul(enc.encode(x2), zproj)); },
      oracle::tensors_of(enc.params()), 11);

  const auto src = batch(rng, 1, 16), ref = batch(rng, 1, 16);
  TensorD dz({1, 66}, oracle::random_vec(rng, 66, -0.5, 0.5));
  TensorD oproj({1, 3, 16, 16}, oracle::random_vec(rng, 768));
  run("modnet.forward", [&] { return ops::sum(ops::mul(net.forward(src, dz).corrected, oproj)); },
      oracle::tensors_of(net.params()), 12);
  run("loss_pix", [&] { return loss_pix(net.forward(src, dz).corrected, ref); },
      oracle::tensors_of(net.params()), 13);
  run("loss_dc", [&] { return loss_dc(net.forward(src, dz).corrected, ref); },
      oracle::tensors_of(net.params()), 14);

  // Teacher starts as a copy; move the student away so the two differ.
  ContrastiveState<double> state(enc, ContrastiveConfig{});
  oracle::perturb(enc.params(), 3, 0.02);
  const auto x4 = batch(rng, 4, 16);
  Rows q = unit_rows(random_rows(rng, 6, 66));
  for (const auto& r : q) state.queue().push_back(r);
  const auto t4 = state.teacher_codes(x4);
  run("loss_ctr",
      [&] { return contrastive_loss(enc.encode(x4), t4, state.queue(), state.config()).loss; },
      oracle::tensors_of(enc.params()), 15);

  const auto xs = batch(rng, 2, 16), xr = batch(rng, 2, 16);
  const auto both = ops::concat(std::vector<TensorD>{xs, xr}, 0);
  const LossWeights w;
  auto full = [&] {
    const auto z = enc.encode(both);
    const auto zs = ops::narrow(z, 0, 0, 2), zr = ops::narrow(z, 0, 2, 2);
    const auto out = net.forward(xs, delta_z(zs, zr)).corrected;
    const auto ctr = contrastive_loss(zs, state.teacher_codes(xs), state.queue(), state.config()).loss;
    return total_loss(loss_pix(out, xr), loss_dc(out, xr), ctr, w);
  };
  auto params = oracle::tensors_of(enc.params());
  for (const auto& p : oracle::tensors_of(net.params())) params.push_back(p);
  run("total_loss", full, params, 16);

  state.teacher().params().zero_grad();
  full().backward();
  std::size_t nonzero = 0;
  for (const auto& [n, t] : state.teacher().params().entries())
    if (t.has_grad())
      for (double g : t.grad()) nonzero += g != 0.0;
  o.detail << "teacher gradient entries nonzero: " << nonzero;
  o.require(nonzero == 0, "teacher gradient exactly zero");
}

// A3
TrainConfig smoke_config() {
  TrainConfig cfg;
  cfg.synthetic = true;
  cfg.image_size = 64;
  cfg.batch = 4;
  cfg.lr = 2e-4;
  cfg.max_steps = 200;
  cfg.seed = 7;
  return cfg;
}

constexpr std::uint64_t kHoldoutSeed = 0xfeed;

void training_smoke(Outcome& o, Model& trained) {
  Trainer trainer(smoke_config());
  std::vector<double> pix;
  while (trainer.steps_done() < trainer.total_steps()) {
    const auto s = trainer.step();
    pix.push_back(s.pix);
    if (s.step % 50 == 0)
      std::fprintf(stderr, "  A3 step %lld L_pix %.5f total %.5f\n", static_cast<long long>(s.step), s.pix, s.total);
  }
  trained = trainer.model();

  auto window_mean = [&](std::size_t from) {
    return std::accumulate(pix.begin() + from, pix.begin() + from + 50, 0.0) / 50;
  };
  const double first = window_mean(0), last = window_mean(150);
  bool decreasing = true;
  for (std::size_t k = 50; k < 200; k += 50) decreasing &= window_mean(k) < window_mean(k - 50);
  o.detail << "(i) L_pix " << first << " -> " << last << " ratio " << last / first
           << (decreasing ? ", 50-step means strictly decreasing" : ", 50-step means NOT decreasing");
  o.require(last <= 0.5 * first, "(i) late L_pix <= 50% of early");
  o.require(decreasing, "50-step window means strictly decrease");

  const auto held = synthetic_holdout(16, 64, kHoldoutSeed);
  double gain = 0;
  int dark = 0, brighter = 0;
  for (const auto& p : held) {
    const auto out = correct(trained, p.source, p.reference);
    gain += psnr(out, p.reference) - psnr(p.source, p.reference);
    const double ms = luma_mean(p.source);
    if (ms < luma_mean(p.reference)) {
      ++dark;
      if (luma_mean(out) > ms) ++brighter;
    }
  }
  gain /= static_cast<double>(held.size());
  o.detail << "; (ii) mean PSNR gain " << gain << " dB; (iii) " << brighter << "/" << dark
           << " dark-source pairs brightened";
  o.require(gain >= 1.0, "(ii) PSNR gain >= 1 dB");
  o.require(brighter == dark, "(iii) every dark-source pair brightened");
}

// A4
void structural_identities(Outcome& o) {
  std::mt19937_64 rng(404);
  int identity_fail = 0;
  for (int i = 0; i < 10; ++i) {
    const auto model = make_model(1000 + i, 32);
    const auto h = 8 + static_cast<std::int64_t>(rng() % 40), w = 8 + static_cast<std::int64_t>(rng() % 40);
    const auto s = oracle::random_image(rng, h, w), r = oracle::random_image(rng, 24, 24);
    if (correct(model, s, r).pixels != s.pixels) ++identity_fail;
  }
  o.require(identity_fail == 0, "correct() at init is the identity");

  ModNet<double> fresh;
  int film_fail = 0;
  for (int t = 0; t < 5; ++t) {
    TensorD dz({3, 66}, oracle::random_vec(rng, 198, -5, 5));
    for (int scale = 1; scale <= 3; ++scale) {
      const auto [alpha, beta] = fresh.film_params(dz, scale);
      for (double a : alpha.data()) film_fail += a != 1.0;
      for (double b : beta.data()) film_fail += b != 0.0;
    }
  }
  o.require(film_fail == 0, "film params (1, 0) at init");

  ModNet<double> moved;
  oracle::perturb(moved.params(), 5, 0.5);
  int gate_fail = 0;
  for (double spread : {0.0, 1.0, 5.0}) {
    TensorD dz({4, 66}, oracle::random_vec(rng, 264, -spread, spread));
    const auto m = moved.modulation(dz);
    for (const auto& g : m.gate)
      for (double v : g.data()) gate_fail += !(v > 0.0 && v < 1.0);
  }
  o.require(gate_fail == 0, "pcr gates in (0, 1)");

  ModNet<float> wild;
  oracle::perturb(wild.params(), 6, 0.2);
  for (auto& v : wild.output_conv().weight.mutable_data()) v = (v >= 0 ? 1 : -1) * 1000.0f;
  for (auto& v : wild.output_conv().bias.mutable_data()) v = -50.0f;
  std::vector<Image> imgs = {oracle::random_image(rng, 20, 28), oracle::random_image(rng, 20, 28)};
  TensorF dz({2, 66}, std::vector<float>(132, 3.0f));
  const auto out = wild.forward(to_tensor<float>(std::span<const Image>(imgs)), dz).corrected;
  int range_fail = 0;
  for (float v : out.data()) range_fail += !(v >= 0.0f && v <= 1.0f);
  o.require(range_fail == 0, "output in [0, 1] under huge residual weights");
  o.detail << "identity failures " << identity_fail << ", film " << film_fail << ", gates " << gate_fail
           << ", range " << range_fail;
}

// A5
void contrastive_correctness(Outcome& o) {
  ContrastiveConfig cfg;
  std::mt19937_64 rng(505);
  struct Case {
    Rows s, t, q;
    double pct;
  };
  std::vector<Case> cases;
  cases.push_back({{{1, 0.1, 0}, {0.9, 0, 0.1}, {0, 1, 0.1}, {0.1, 0.9, 0}},
                   {{1, 0, 0}, {1, 0.05, 0}, {0, 1, 0}, {0.05, 1, 0}}, {}, 10});
  cases.push_back({cases[0].s, cases[0].t, {}, 70});
  cases.push_back({{{0.3, -0.2, 0.5, 0.1}, {-0.4, 0.2, 0.1, 0.9}, {0.6, 0.6, -0.1, 0}, {0.2, 0.1, 0.1, -0.7}},
                   {{0.2, -0.1, 0.6, 0.1}, {-0.5, 0.1, 0.2, 0.8}, {0.7, 0.5, 0, 0.1}, {0.1, 0.2, 0, -0.8}},
                   unit_rows({{0.25, -0.15, 0.55, 0.1}, {1, 1, 1, 1}, {-0.45, 0.15, 0.15, 0.85}}), 30});
  cases.push_back({random_rows(rng, 4, 66), random_rows(rng, 4, 66), unit_rows(random_rows(rng, 12, 66)), 10});
  cases.push_back({random_rows(rng, 4, 66), random_rows(rng, 4, 66), {}, 50});
  double worst = 0;
  for (const auto& c : cases) {
    cfg.percentile = c.pct;
    const double ref = oracle::contrastive(c.s, c.t, c.q, cfg.tau, c.pct, nullptr);
    const auto r = contrastive_loss(from_rows(c.s), from_rows(c.t), {c.q.begin(), c.q.end()}, cfg);
    worst = std::max(worst, std::abs(r.loss.item() - ref));
  }
  o.require(worst <= 1e-6, "matches scalar evaluation to 1e-6");
  cfg = ContrastiveConfig{};

  const Rows twin = {{0.3, 0.4, 0.5}, {0.3, 0.4, 0.5}};
  const double identical = contrastive_loss(from_rows(twin), from_rows(twin), {}, cfg).loss.item();
  o.require(std::abs(identical) < 1e-12, "identical pair gives 0");

  const auto s = random_rows(rng, 4, 66), t = random_rows(rng, 4, 66);
  const auto empty = contrastive_loss(from_rows(s), from_rows(t), {}, cfg, -1.0);
  o.require(empty.loss.item() == 0.0 && empty.skipped == 4, "empty positives give 0 with skip = batch");

  const auto ps = random_rows(rng, 6, 66), pt = random_rows(rng, 6, 66);
  const auto q = unit_rows(random_rows(rng, 10, 66));
  const std::deque<std::vector<double>> queue(q.begin(), q.end());
  const double base = contrastive_loss(from_rows(ps), from_rows(pt), queue, cfg).loss.item();
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  double drift = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Rows a, b;
    for (int i : perm) {
      a.push_back(ps[i]);
      b.push_back(pt[i]);
    }
    drift = std::max(drift, std::abs(contrastive_loss(from_rows(a), from_rows(b), queue, cfg).loss.item() - base));
  }
  o.require(drift <= 1e-9, "permutation invariant to 1e-9");
  o.detail << "oracle error " << worst << ", identical " << identical << ", skipped " << empty.skipped
           << ", permutation drift " << drift;
}

// A6
void hyperparameters(Outcome& o) {
  const auto j = TrainConfig{}.to_json();
  const nlohmann::ordered_json expected = {
      {"lambda_dc", 0.5},      {"lambda_ctr", 0.1},        {"tau", 0.07},
      {"lr", 2e-4},            {"tau_under", 0.05},        {"tau_over", 0.95},
      {"dark_channel_window", 16}, {"descriptor_width", 66}, {"modnet_channels", {32, 64, 64}},
      {"batch", 32},           {"image_size", 512},        {"epochs_const", 100},
      {"epochs_decay", 100}};
  for (const auto& [key, value] : expected.items()) {
    const bool ok = j.contains(key) && j[key] == value;
    if (!ok) o.detail << key << "=" << (j.contains(key) ? j[key].dump() : "missing") << " ";
    o.require(ok, key);
  }
  o.detail << expected.size() << " values checked";
}

// A7
void determinism(Outcome& o, const Model& trained) {
  kernels::ModeGuard serial(kernels::Mode::Serial);
  auto cfg = smoke_config();
  cfg.max_steps = 10;
  auto final_loss = [&] {
    Trainer t(cfg);
    StepLog last;
    while (t.steps_done() < t.total_steps()) last = t.step();
    return last.total;
  };
  const double a = final_loss(), b = final_loss();
  o.require(std::abs(a - b) <= 1e-5, "final losses equal");

  const auto path = std::filesystem::temp_directory_path() / "expx_acceptance.expx";
  save_model(path, trained);
  const auto back = load_model(path);
  std::filesystem::remove(path);
  const auto s = synth_base_image(48, 1), r = synth_base_image(48, 2);
  const bool same = correct(trained, s, r).pixels == correct(back, s, r).pixels;
  o.require(same, "checkpoint round-trip forward bit-identical");
  o.detail << "final losses " << a << " / " << b << ", round-trip " << (same ? "bit-identical" : "differs");
}

}  // namespace

int main() {
  Model trained = make_model(7);
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria = {
      {"A1 statistical oracles", statistical_oracles},
      {"A2 gradient suite", gradient_suite},
      {"A3 training smoke", [&](Outcome& o) { training_smoke(o, trained); }},
      {"A4 structural identities", structural_identities},
      {"A5 contrastive correctness", contrastive_correctness},
      {"A6 hyperparameter fidelity", hyperparameters},
      {"A7 determinism and persistence", [&](Outcome& o) { determinism(o, trained); }},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      check(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", name, secs, o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
