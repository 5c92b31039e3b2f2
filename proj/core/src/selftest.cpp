#include "higfa/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "higfa/contour.hpp"
#include "higfa/diffusion.hpp"
#include "higfa/guidance.hpp"
#include "higfa/models.hpp"
#include "higfa/random.hpp"
#include "higfa/synthbench.hpp"

namespace higfa {

namespace {

using nd::Tensor;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

PropertyResult check(const std::string& name, const std::function<std::string()>& body) {
  try {
    std::string failure = body();
    return {name, failure.empty(), failure};
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what()};
  }
}

std::string round_trip(std::uint64_t seed) {
  const auto s = diffusion::build_schedule();
  Rng rng = make_rng(seed, {1});
  double worst = 0.0;
  for (int img = 0; img < 10; ++img) {
    const Tensor x0 = Tensor::randn({256}, rng);
    const Tensor eps = Tensor::randn({256}, rng);
    for (int t : s.step_map) {
      const Tensor back = diffusion::predict_x0(s, diffusion::q_sample(s, x0, t, eps), t, eps);
      for (std::size_t i = 0; i < x0.size(); ++i) {
        worst = std::max(worst, std::abs(back[i] - x0[i]) / std::max(1.0, std::abs(x0[i])));
      }
    }
  }
  return worst <= 1e-9 ? "" : "relative error " + num(worst);
}

std::string final_step(std::uint64_t seed) {
  const auto s = diffusion::build_schedule();
  auto st = diffusion::initial_state(s, {64}, seed);
  Rng rng = make_rng(seed, {2});
  while (st.step_index + 1 < s.inference_steps()) st = diffusion::ddim_step(st, Tensor::randn({64}, rng), s);
  const Tensor eps = Tensor::randn({64}, rng);
  const Tensor x0 = diffusion::predict_x0(s, st.x, st.t, eps);
  const auto last = diffusion::ddim_step(st, eps, s);
  return nd::bitwise_equal(last.x, x0) ? "" : "final step differs from x0-hat";
}

std::string cfg_identities(std::uint64_t seed) {
  Rng rng = make_rng(seed, {3});
  const Tensor u = Tensor::randn({32}, rng), c = Tensor::randn({32}, rng);
  if (!nd::bitwise_equal(guidance::cfg_combine(u, c, 1.0), c)) return "s=1 is not eps_cond";
  if (!nd::bitwise_equal(guidance::cfg_combine(u, c, 0.0), u)) return "s=0 is not eps_uncond";
  const double v = guidance::cfg_combine(Tensor::vector({0.2}), Tensor::vector({0.4}), 7.5)[0];
  return std::abs(v - 1.7) <= 1e-15 ? "" : "scalar case gave " + num(v);
}

std::string gradient_fd(std::uint64_t seed) {
  const models::Classifier cls({256, 16, 16, 4}, derive_seed(seed, {4}));
  Rng rng = make_rng(seed, {5});
  const double ab = 0.5;
  double worst = 0.0;
  for (const auto& dec : {models::Decoder::identity(), models::Decoder::random_linear(256, 256, seed)}) {
    const Tensor x = Tensor::randn({1, 256}, rng, 0.5);
    const Tensor eps = Tensor::randn({1, 256}, rng, 0.5);
    const int target = 1;
    const auto g = guidance::classifier_gradient(x, ab, eps, std::span(&target, 1), cls, dec);
    auto f = [&](const Tensor& xt) {
      const Tensor x0 = diffusion::predict_x0(xt, ab, eps);
      return std::log(cls.probabilities(dec.decode(x0))(0, 1));
    };
    const double h = 1e-5;
    for (std::size_t i = 0; i < 256; i += 17) {
      Tensor a = x, b = x;
      a[i] += h;
      b[i] -= h;
      const double fd = (f(a) - f(b)) / (2 * h);
      worst = std::max(worst, std::abs(fd - g.grad[i]) / std::max(1e-6, std::abs(fd) + std::abs(g.grad[i])));
    }
  }
  return worst < 1e-4 ? "" : "relative error " + num(worst);
}

std::string scheduler_law(std::uint64_t seed) {
  models::DenoiserConfig dc;
  dc.hidden = 32;
  const models::Denoiser den(dc, seed);
  const models::Classifier cls({256, 16, 16, 4}, derive_seed(seed, {6}));
  const auto s = diffusion::build_schedule();
  guidance::GuidanceConfig g;
  const auto em = contour::canny(synthbench::render(0, 200, 0, 0));
  const auto sample = guidance::higfa_sample(den, &cls, models::Decoder::identity(), {0, 0}, &em, 0, g, s, seed);
  std::optional<double> prev = sample.trace.seed_confidence;
  for (const auto& r : sample.trace.records) {
    if (r.phase == guidance::Phase::warmup) {
      if (r.s_cfg != g.s_cfg || r.s_ctl != g.s_ctl || r.s_cls != 0.0) return "warm-up scales changed";
      continue;
    }
    if (!prev || !r.confidence) return "missing confidence";
    if (std::abs(r.s_cfg - g.s_cfg * *prev) > 1e-12 || std::abs(r.s_ctl - g.s_ctl * *prev) > 1e-12 ||
        std::abs(r.s_cls - g.s_cls * (1.0 - *r.confidence)) > 1e-12) {
      return "dynamic update violated at step " + std::to_string(r.step);
    }
    prev = r.confidence;
  }
  return "";
}

std::string tps_interpolates(std::uint64_t seed) {
  Rng rng = make_rng(seed, {7});
  std::uniform_real_distribution<double> u(0.0, 15.0);
  std::vector<contour::Point> src, dst;
  for (int i = 0; i < 6; ++i) {
    src.push_back({u(rng), u(rng)});
    dst.push_back({src.back().x + u(rng) / 8, src.back().y - u(rng) / 8});
  }
  const auto w = contour::fit_tps(src, dst);
  double worst = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto p = w(src[i]);
    worst = std::max({worst, std::abs(p.x - dst[i].x), std::abs(p.y - dst[i].y)});
  }
  return worst < 1e-9 ? "" : "residual " + num(worst);
}

std::string contour_determinism(std::uint64_t seed) {
  const auto img = synthbench::render(5, 210, 1, -1);
  Rng a = make_rng(seed, {8}), b = make_rng(seed, {8});
  const auto ea = contour::augment_contour(img, contour::Rigidity::nonrigid, {}, a);
  const auto eb = contour::augment_contour(img, contour::Rigidity::nonrigid, {}, b);
  if (ea.bits != eb.bits) return "same seed, different edge maps";
  return ea.is_binary() ? "" : "edge map is not binary";
}

std::string mix_ratio(std::uint64_t seed) {
  const auto d = synthbench::generate_benchmark(4, 16, 6.0, seed);
  const auto real = synthbench::split_items(d, synthbench::Split::train);
  std::vector<synthbench::SyntheticSample> pool;
  for (std::size_t i = 0; i < 3 * real.size(); ++i) pool.push_back({real[i % real.size()].image, 0, std::to_string(i)});
  for (double r : {0.0, 0.2, 0.4, 0.6, 1.0}) {
    const auto m = synthbench::mix(real, pool, r, seed);
    const double frac = static_cast<double>(m.synthetic_count()) / static_cast<double>(m.entries.size());
    if (std::abs(frac - r) > 1.0 / static_cast<double>(real.size())) return "ratio " + num(r) + " gave " + num(frac);
  }
  return "";
}

std::string mode_channels(std::uint64_t seed) {
  models::DenoiserConfig dc;
  dc.hidden = 16;
  const models::Denoiser den(dc, seed);
  const models::Classifier cls({256, 8, 8, 4}, seed);
  const auto s = diffusion::build_schedule();
  const auto em = contour::canny(synthbench::render(2, 180, 0, 0));
  guidance::GuidanceConfig text_only, text_contour, full;
  text_only.s_ctl = 0.0;
  text_only.s_cls = 0.0;
  text_contour.s_cls = 0.0;
  auto run = [&](const guidance::GuidanceConfig& g, const contour::EdgeMap* e) {
    return guidance::higfa_sample(den, &cls, models::Decoder::identity(), {1, 1}, e, 2, g, s, seed).trace;
  };
  const auto a = run(text_only, nullptr), b = run(text_contour, &em), c = run(full, &em);
  for (const auto& r : a.records) {
    if (r.s_ctl != 0.0 || r.s_cls != 0.0) return "text_only used contour or classifier";
  }
  for (const auto& r : b.records) {
    if (r.s_ctl == 0.0 || r.s_cls != 0.0) return "text_contour channels wrong";
  }
  if (a.classifier_evaluations || b.classifier_evaluations) return "classifier evaluated without classifier guidance";
  return c.classifier_evaluations > 0 ? "" : "higfa never evaluated the classifier";
}

}  // namespace

std::vector<PropertyResult> run_selftest(std::uint64_t seed) {
  return {
      check("q_sample/predict_x0 round trip", [&] { return round_trip(seed); }),
      check("final DDIM step returns x0-hat", [&] { return final_step(seed); }),
      check("cfg_combine identities", [&] { return cfg_identities(seed); }),
      check("classifier gradient matches finite differences", [&] { return gradient_fd(seed); }),
      check("guidance scale update law", [&] { return scheduler_law(seed); }),
      check("TPS interpolates control points", [&] { return tps_interpolates(seed); }),
      check("contour augmentation is seed-deterministic", [&] { return contour_determinism(seed); }),
      check("mix hits the requested ratio", [&] { return mix_ratio(seed); }),
      check("mode guidance channels nest", [&] { return mode_channels(seed); }),
  };
}

}  // namespace higfa
