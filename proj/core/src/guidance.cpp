#include "higfa/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "higfa/error.hpp"

namespace higfa::guidance {
namespace {

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string("dynamic_update: ") + name + " = " + fmt9(p) + " is not in [0, 1]");
}

}  // namespace

void GuidanceConfig::validate(std::size_t inference_steps) const {
  if (!(s_cfg >= 0.0)) throw Error("guidance: s_cfg must be >= 0");
  if (!(s_ctl >= 0.0)) throw Error("guidance: s_ctl must be >= 0");
  if (!(s_cls >= 0.0)) throw Error("guidance: s_cls must be >= 0");
  if (warmup_steps < 0 || static_cast<std::size_t>(warmup_steps) > inference_steps) {
    throw Error("guidance: warmup_steps " + std::to_string(warmup_steps) + " outside [0, " +
                std::to_string(inference_steps) + "]");
  }
  if (!std::isfinite(sigma)) throw Error("guidance: sigma must be finite");
  if (!(confidence_floor > 0.0 && confidence_floor < confidence_ceiling && confidence_ceiling < 1.0)) {
    throw Error("guidance: need 0 < confidence_floor < confidence_ceiling < 1");
  }
}

const char* phase_name(Phase p) noexcept { return p == Phase::warmup ? "warmup" : "dynamic"; }

std::string GuidanceTrace::to_csv() const {
  std::ostringstream os;
  os << "step,t,phase,s_cfg,s_ctl,s_cls,confidence\n";
  for (const auto& r : records) {
    os << r.step << ',' << r.t << ',' << phase_name(r.phase) << ',' << fmt9(r.s_cfg) << ',' << fmt9(r.s_ctl) << ','
       << fmt9(r.s_cls) << ',' << (r.confidence ? fmt9(*r.confidence) : std::string()) << '\n';
  }
  return os.str();
}

void GuidanceTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << to_csv();
}

GuidanceTrace GuidanceTrace::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "step,t,phase,s_cfg,s_ctl,s_cls,confidence") {
    throw Error("trace csv: unexpected header");
  }
  GuidanceTrace trace;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) {
      f.push_back(line.substr(start, pos - start));
    }
    f.push_back(line.substr(start));
    if (f.size() != 7) throw Error("trace csv line " + std::to_string(lineno) + ": expected 7 fields");
    try {
      TraceRecord r;
      r.step = std::stoul(f[0]);
      r.t = std::stoi(f[1]);
      if (f[2] == "warmup") r.phase = Phase::warmup;
      else if (f[2] == "dynamic") r.phase = Phase::dynamic;
      else throw Error("bad phase '" + f[2] + "'");
      r.s_cfg = std::stod(f[3]);
      r.s_ctl = std::stod(f[4]);
      r.s_cls = std::stod(f[5]);
      if (!f[6].empty()) {
        r.confidence = std::stod(f[6]);
        ++trace.classifier_evaluations;
      }
      trace.records.push_back(r);
    } catch (const std::logic_error&) {
      throw Error("trace csv line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return trace;
}

GuidanceTrace GuidanceTrace::read_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_csv(ss.str());
}

double GuidanceTrace::cumulative_s_cls() const {
  double s = 0.0;
  for (const auto& r : records) s += r.s_cls;
  return s;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s_cfg) {
  if (eps_uncond.shape() != eps_cond.shape()) {
    throw ShapeError("cfg_combine: shapes " + nd::to_string(eps_uncond.shape()) + " and " +
                     nd::to_string(eps_cond.shape()) + " differ");
  }
  Tensor out = eps_uncond;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::lerp(eps_uncond[i], eps_cond[i], s_cfg);
  return out;
}

ScaleTriple dynamic_update(const GuidanceConfig& config, double p_prev, double p_curr) {
  check_probability(p_prev, "p_prev");
  check_probability(p_curr, "p_curr");
  return {config.s_cfg * p_prev, config.s_ctl * p_prev, config.s_cls * (1.0 - p_curr)};
}

ClassifierGradient classifier_gradient(const Tensor& x_t, double alpha_bar, const Tensor& eps_base,
                                       std::span<const int> targets, const models::Classifier& classifier,
                                       const models::Decoder& decoder, double floor, double ceiling) {
  if (x_t.rank() != 2 || x_t.shape() != eps_base.shape()) {
    throw ShapeError("classifier_gradient: x_t " + nd::to_string(x_t.shape()) + " and eps " +
                     nd::to_string(eps_base.shape()) + " must be equal rank-2 shapes");
  }
  const std::size_t b = x_t.dim(0);
  if (targets.size() != b) throw ShapeError("classifier_gradient: one target per row required");
  std::vector<std::size_t> idx(b);
  for (std::size_t r = 0; r < b; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classifier.classes()) {
      throw Error("classifier_gradient: unknown class label " + std::to_string(targets[r]));
    }
    idx[r] = static_cast<std::size_t>(targets[r]);
  }
  if (!(alpha_bar > 0.0)) throw DomainError("classifier_gradient: alpha_bar must be > 0");

  nd::Tape tape;
  Tensor leaf = x_t;
  leaf.set_requires_grad(true);
  const nd::Var x = tape.leaf(std::move(leaf));
  const nd::Var eps = tape.constant(eps_base);
  const nd::Var x0 = nd::scale(nd::sub(x, nd::scale(eps, std::sqrt(1.0 - alpha_bar))), 1.0 / std::sqrt(alpha_bar));
  const nd::Var lp = nd::pick(classifier.log_probs(tape, decoder.decode(tape, x0)), idx);

  ClassifierGradient out;
  out.confidence.resize(b);
  Tensor mask({b});
  for (std::size_t r = 0; r < b; ++r) {
    const double p = std::exp(lp.value()[r]);
    out.confidence[r] = std::clamp(p, floor, ceiling);
    mask[r] = (p > floor && p < ceiling) ? 1.0 : 0.0;
  }
  tape.backward(nd::sum(nd::mul(lp, tape.constant(std::move(mask)))));
  out.grad = x.grad().value();
  if (!out.grad.all_finite()) throw DomainError("classifier_gradient: non-finite gradient");
  return out;
}

std::pair<Tensor, double> classifier_grad_term(const Tensor& x_t, int t, const Tensor& eps_base, int target_class,
                                               const models::Classifier& classifier,
                                               const models::Decoder& decoder, double s_cls, double sigma,
                                               const diffusion::NoiseSchedule& schedule, double floor,
                                               double ceiling) {
  if (!(s_cls >= 0.0)) throw Error("classifier_grad_term: s_cls must be >= 0");
  if (x_t.shape() != eps_base.shape()) throw ShapeError("classifier_grad_term: x_t and eps_base shapes differ");
  const std::size_t d = x_t.size();
  const int target[1] = {target_class};
  ClassifierGradient g;
  try {
    g = classifier_gradient(x_t.reshaped({1, d}), schedule.alpha_bar(t), eps_base.reshaped({1, d}), target,
                            classifier, decoder, floor, ceiling);
  } catch (const DomainError& e) {
    throw DomainError(std::string(e.what()) + " at t=" + std::to_string(t));
  }
  if (s_cls == 0.0) return {eps_base, g.confidence[0]};
  Tensor out = eps_base;
  for (std::size_t i = 0; i < d; ++i) out[i] = eps_base[i] - s_cls * sigma * g.grad[i];
  return {out, g.confidence[0]};
}

Tensor edge_tensor(const contour::EdgeMap& em) {
  Tensor out({em.bits.size()});
  for (std::size_t i = 0; i < em.bits.size(); ++i) out[i] = em.bits[i] ? 1.0 : 0.0;
  return out;
}

SampleBatch higfa_sample_batch(const models::Denoiser& denoiser, const models::Classifier* classifier,
                               const models::Decoder& decoder, std::span<const SampleRequest> requests,
                               const GuidanceConfig& config, const diffusion::NoiseSchedule& schedule) {
  config.validate(schedule.inference_steps());
  const std::size_t b = requests.size();
  const std::size_t d = denoiser.config().pixels();
  const std::size_t steps = schedule.inference_steps();
  const auto warmup = static_cast<std::size_t>(config.warmup_steps);
  const bool guided = classifier != nullptr && config.classifier_active();

  SampleBatch out;
  out.traces.resize(b);
  if (b == 0) {
    out.images = Tensor({0, d});
    return out;
  }

  std::vector<int> targets(b);
  bool any_contour = false;
  for (std::size_t r = 0; r < b; ++r) {
    targets[r] = requests[r].target_class;
    if (guided && (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classifier->classes())) {
      throw Error("higfa_sample: unknown target class " + std::to_string(targets[r]));
    }
    if (requests[r].contour) {
      if (requests[r].contour->size() != d) throw ShapeError("higfa_sample: contour size does not match the image");
      any_contour = true;
    }
  }

  // Rows [0, b) carry the prompt, rows [b, 2b) the null prompt; both keep
  // the style and see the contour.
  models::DenoiseBatch batch;
  batch.x = Tensor({2 * b, d});
  batch.t.assign(2 * b, 0);
  batch.cond.resize(2 * b);
  batch.contour_scale.assign(2 * b, 0.0);
  if (any_contour) {
    Tensor edges({2 * b, d});
    for (std::size_t r = 0; r < b; ++r) {
      if (!requests[r].contour) continue;
      edges.set_row(r, requests[r].contour->values());
      edges.set_row(b + r, requests[r].contour->values());
    }
    batch.contour = std::move(edges);
  }
  for (std::size_t r = 0; r < b; ++r) {
    batch.cond[r] = requests[r].cond;
    batch.cond[b + r] = requests[r].cond.without_prompt();
  }

  diffusion::DiffusionState state = diffusion::initial_state(schedule, {b, d}, 0);
  for (std::size_t r = 0; r < b; ++r) {
    state.x.set_row(r, diffusion::initial_state(schedule, {d}, requests[r].seed).x.values());
  }

  std::vector<double> p_prev(b, 1.0);
  std::vector<double> s_cfg(b), s_ctl(b), s_cls(b);

  for (std::size_t i = 0; i < steps; ++i) {
    const int t = state.t;
    const double ab = schedule.alpha_bar(t);
    const bool dynamic = i >= warmup;
    for (std::size_t r = 0; r < b; ++r) {
      if (dynamic && config.adaptive) {
        s_cfg[r] = config.s_cfg * p_prev[r];
        s_ctl[r] = config.s_ctl * p_prev[r];
      } else {
        s_cfg[r] = config.s_cfg;
        s_ctl[r] = config.s_ctl;
      }
      s_cls[r] = 0.0;
    }

    for (std::size_t r = 0; r < 2 * b; ++r) {
      const std::size_t src = r % b;
      std::copy_n(state.x.data() + src * d, d, batch.x.data() + r * d);
      batch.t[r] = t;
      batch.contour_scale[r] = requests[src].contour ? s_ctl[src] : 0.0;
    }
    Tensor eps_pair;
    try {
      eps_pair = denoiser.predict(batch);
    } catch (const Error& e) {
      throw Error("higfa_sample: step " + std::to_string(i) + ": " + e.what());
    }
    Tensor eps({b, d});
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t j = 0; j < d; ++j) eps(r, j) = std::lerp(eps_pair(b + r, j), eps_pair(r, j), s_cfg[r]);
    }

    std::vector<double> confidence;
    if (guided && (dynamic || i + 1 == warmup)) {
      ClassifierGradient g;
      try {
        g = classifier_gradient(state.x, ab, eps, targets, *classifier, decoder, config.confidence_floor,
                                config.confidence_ceiling);
      } catch (const Error& e) {
        throw Error("higfa_sample: step " + std::to_string(i) + " (t=" + std::to_string(t) + "): " + e.what());
      }
      confidence = g.confidence;
      for (std::size_t r = 0; r < b; ++r) {
        ++out.traces[r].classifier_evaluations;
        if (!dynamic) {
          out.traces[r].seed_confidence = confidence[r];
          p_prev[r] = confidence[r];
          continue;
        }
        s_cls[r] = config.adaptive ? config.s_cls * (1.0 - confidence[r]) : config.s_cls;
        const double k = s_cls[r] * config.sigma;
        if (k != 0.0) {
          for (std::size_t j = 0; j < d; ++j) eps(r, j) -= k * g.grad(r, j);
        }
        p_prev[r] = confidence[r];
      }
    }

    for (std::size_t r = 0; r < b; ++r) {
      TraceRecord rec;
      rec.step = i;
      rec.t = t;
      rec.phase = dynamic ? Phase::dynamic : Phase::warmup;
      rec.s_cfg = s_cfg[r];
      rec.s_ctl = s_ctl[r];
      rec.s_cls = s_cls[r];
      if (!confidence.empty()) rec.confidence = confidence[r];
      out.traces[r].records.push_back(rec);
    }
    state = diffusion::ddim_step(std::move(state), eps, schedule);
  }

  out.images = decoder.decode(state.x);
  for (auto& v : out.images.values()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

Sample higfa_sample(const models::Denoiser& denoiser, const models::Classifier* classifier,
                    const models::Decoder& decoder, const models::Conditioning& text_cond,
                    const contour::EdgeMap* contour, int target_class, const GuidanceConfig& config,
                    const diffusion::NoiseSchedule& schedule, std::uint64_t seed) {
  SampleRequest req{text_cond, std::nullopt, target_class, seed};
  if (contour) req.contour = edge_tensor(*contour);
  SampleBatch batch = higfa_sample_batch(denoiser, classifier, decoder, {&req, 1}, config, schedule);
  const std::size_t p = batch.images.dim(1);
  return {batch.images.reshaped({p}), std::move(batch.traces.front())};
}

}  // namespace higfa::guidance
