#include <doctest.h>

#include "higfa/config.hpp"
#include "higfa/error.hpp"

using namespace higfa;
using namespace higfa::config;

TEST_SUITE("config") {

TEST_CASE("an empty file yields defaults and logs every key") {
  std::vector<std::string> log;
  const auto c = parse_config("", [&](const std::string& s) { log.push_back(s); });
  CHECK(log.size() == c.defaulted.size());
  CHECK_FALSE(log.empty());
  CHECK(log.front().find("not set, using default") != std::string::npos);
  CHECK(c.experiment.guidance.s_cfg == 7.5);
  CHECK(c.experiment.guidance.warmup_steps == 20);
  CHECK(c.experiment.benchmark.per_class == 64);
  CHECK(c.s_cls_sweep == std::vector<double>{0, 2, 5, 10, 20});
  CHECK(c.warmup_sweep == std::vector<int>{10, 15, 20, 21, 25, 30});
  CHECK(c.experiment.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
}

TEST_CASE("reference config parses back with nothing defaulted") {
  const auto c = parse_config(reference_config());
  CHECK(c.defaulted.empty());
}

TEST_CASE("given values override defaults") {
  const auto c = parse_config(
      "[guidance]\ns_cls = 10\nadaptive = false\n[harness]\nratios = 0.2, 0.6\nmodes = none,higfa\nseeds = 3\n"
      "[contour]\nrigidity = nonrigid\nperturbation = 1.5\n[models]\noptimizer = sgd\n");
  CHECK(c.experiment.guidance.s_cls == 10.0);
  CHECK_FALSE(c.experiment.guidance.adaptive);
  CHECK(c.experiment.ratios == std::vector<double>{0.2, 0.6});
  CHECK(c.modes == std::vector<harness::Mode>{harness::Mode::none, harness::Mode::higfa});
  CHECK(c.experiment.seeds.size() == 3);
  CHECK(c.experiment.augment.rigidity == contour::Rigidity::nonrigid);
  CHECK(*c.experiment.augment.contour.perturbation == 1.5);
  CHECK(c.experiment.training.optimizer == models::Optimizer::sgd);
}

TEST_CASE("unknown or malformed entries are rejected with the key name") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("[guidance]\nscfg = 1\n").find("guidance.scfg") != std::string::npos);
  CHECK(message("[nope]\na = 1\n").find("[nope]") != std::string::npos);
  CHECK(message("[guidance]\ns_cls = five\n").find("guidance.s_cls") != std::string::npos);
  CHECK(message("[guidance]\nwarmup_steps = 2.5\n").find("warmup_steps") != std::string::npos);
  CHECK(message("[guidance]\nadaptive = maybe\n").find("adaptive") != std::string::npos);
  CHECK(message("[harness]\nmodes = none,cfg\n").find("harness.modes") != std::string::npos);
  CHECK(message("[harness]\nratios = 0.2,,0.4\n").find("harness.ratios") != std::string::npos);
  CHECK(message("s_cls = 5\n").find("outside") != std::string::npos);
  CHECK(message("[models]\ndenoiser_batch = 0\n").find("denoiser_batch") != std::string::npos);
  CHECK_THROWS_AS(load_config("/nonexistent/higfa.cfg"), Error);
}

TEST_CASE("apply_seed sets the benchmark seed and experiment seeds") {
  auto c = parse_config("[harness]\nseeds = 2\n");
  c.apply_seed(42);
  CHECK(c.experiment.benchmark.seed == 42);
  CHECK(c.experiment.seeds == std::vector<std::uint64_t>{1, 2});
}

}  // TEST_SUITE
