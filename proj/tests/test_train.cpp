#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "physnet/errors.hpp"
#include "physnet/synth.hpp"
#include "physnet/train.hpp"
#include "support.hpp"

using namespace physnet;
using namespace physnet::testing;

namespace {

double npl(const std::vector<double>& x, const std::vector<double>& y) {
  return neg_pearson_loss(Tensor64({std::int64_t(x.size())}, x), Tensor64({std::int64_t(y.size())}, y)).item();
}

// Pearson by the textbook sum formula.
double pearson_ref(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = x.size();
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

std::vector<TrainingSample> tiny_dataset(int clips, std::int64_t frames) {
  std::vector<TrainingSample> out;
  for (int i = 0; i < clips; ++i) {
    SynthSpec s;
    s.seed = 100 + i;
    s.frames = frames;
    s.height = 32;
    s.width = 32;
    s.hr_bpm = 60 + 10 * i;
    s.amplitude = 0.05;
    auto c = generate(s);
    out.push_back({c.clip, c.pulse});
  }
  return out;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.model.widths = {4, 4, 4, 4};
  cfg.clip_length = 16;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("negative Pearson examples") {
  CHECK(npl({1, 2, 3}, {1, 2, 3}) == doctest::Approx(0.0));
  CHECK(npl({1, 2, 3}, {3, 2, 1}) == doctest::Approx(2.0));
  CHECK(npl({1, 2, 3}, {1, 2, 4}) == doctest::Approx(1.0 - 9.0 / std::sqrt(84.0)).epsilon(1e-12));
  CHECK(1.0 - 9.0 / std::sqrt(84.0) == doctest::Approx(0.01802).epsilon(1e-3));
  CHECK_THROWS_AS(npl({1, 1, 1}, {1, 2, 3}), DegenerateSignalError);
  CHECK_THROWS_AS(npl({1, 2}, {1, 2, 3}), ValidationError);
}

TEST_CASE("negative Pearson matches the sum-formula oracle and its symmetries") {
  CounterRng rng(1);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> x(n), y(n), ax(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform(-2, 2);
      y[i] = rng.uniform(-2, 2);
    }
    const double a = rng.uniform(0.01, 50), b = rng.uniform(-10, 10);
    for (std::size_t i = 0; i < n; ++i) {
      ax[i] = a * x[i] + b;
      neg[i] = -x[i];
    }
    const double l = npl(x, y);
    CHECK(l == doctest::Approx(1.0 - pearson_ref(x, y)).epsilon(1e-9));
    CHECK(std::abs(npl(ax, y) - l) < 1e-6);
    CHECK(std::abs(npl(neg, y) + l - 2.0) < 1e-6);
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
  }
}

TEST_CASE("batched negative Pearson averages the rows") {
  const Tensor64 p({2, 3}, {1, 2, 3, 1, 2, 3});
  const Tensor64 t({2, 3}, {1, 2, 3, 3, 2, 1});
  CHECK(neg_pearson_loss(p, t).item() == doctest::Approx(1.0));
}

TEST_CASE("mse examples") {
  auto m = [](std::vector<double> x, std::vector<double> y) {
    return mse_loss(Tensor64({std::int64_t(x.size())}, x), Tensor64({std::int64_t(y.size())}, y)).item();
  };
  CHECK(m({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(m({0, 0}, {1, 1}) == 1.0);
  CHECK(m({1, 2}, {3, 5}) == 6.5);
  CHECK_THROWS_AS(m({1, 2}, {1, 2, 3}), ValidationError);
}

TEST_CASE("loss gradients agree with finite differences") {
  CounterRng rng(2);
  for (int inst = 0; inst < 20; ++inst) {
    const auto y = random_tensor<double>({2, 9}, rng);
    auto r = gradcheck([&](const std::vector<Tensor64>& in) -> Tensor64 { return neg_pearson_loss(in[0], y); },
                       {random_tensor<double>({2, 9}, rng)}, rng);
    CHECK(r.max_rel_error < 1e-5);
    r = gradcheck([&](const std::vector<Tensor64>& in) -> Tensor64 { return mse_loss(in[0], y); },
                  {random_tensor<double>({2, 9}, rng)}, rng);
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_CASE("adam examples") {
  Tensor64 theta = Tensor64::scalar(0.0);
  std::vector<Tensor64*> params{&theta};
  std::vector<Tensor64> grads{Tensor64::scalar(1.0)};
  AdamState st;
  adam_step<double>(params, grads, st, 1e-4);
  CHECK(theta.item() == doctest::Approx(-1e-4 / (1 + 1e-8)).epsilon(1e-12));
  CHECK(st.step == 1);

  Tensor64 still = Tensor64::scalar(0.75);
  std::vector<Tensor64*> ps{&still};
  std::vector<Tensor64> zero{Tensor64::scalar(0.0)};
  AdamState st2;
  for (int i = 0; i < 5; ++i) adam_step<double>(ps, zero, st2, 1e-2);
  CHECK(still.item() == 0.75);
  CHECK(st2.step == 5);

  std::vector<Tensor64> bad{Tensor64::scalar(std::nan(""))};
  const double before = still.item();
  CHECK_THROWS_AS(adam_step<double>(ps, bad, st2, 1e-2), ValidationError);
  CHECK(still.item() == before);
  CHECK(st2.step == 5);
}

TEST_CASE("adam matches an independent scalar oracle") {
  CounterRng rng(3);
  for (int inst = 0; inst < 20; ++inst) {
    const int n = 4;
    Tensor64 p({n}, std::vector<double>(n, 0.0));
    for (auto& v : p.mutable_data()) v = rng.uniform(-1, 1);
    std::vector<double> ref(p.data().begin(), p.data().end());
    std::vector<ScalarAdam> oracle(n);
    std::vector<Tensor64*> params{&p};
    AdamState st;
    const double lr = rng.uniform(1e-4, 1e-1);
    for (int step = 0; step < 3; ++step) {
      auto g = random_tensor<double>({n}, rng, -3, 3);
      adam_step<double>(params, std::vector<Tensor64>{g}, st, lr);
      for (int i = 0; i < n; ++i) ref[i] = oracle[i].step(ref[i], g[i], lr);
      for (int i = 0; i < n; ++i) CHECK(std::abs(p[i] - ref[i]) < 1e-10);
    }
    for (const auto& v2 : st.second_moment)
      for (double v : v2) CHECK(v >= 0.0);
  }
}

TEST_CASE("adam updates are invariant to gradient scale") {
  CounterRng rng(4);
  for (double c : {0.1, 0.5, 2.0, 10.0}) {
    Tensor64 a({5}, {0, 0, 0, 0, 0}), b({5}, {0, 0, 0, 0, 0});
    std::vector<Tensor64*> pa{&a}, pb{&b};
    AdamState sa, sb;
    for (int step = 0; step < 3; ++step) {
      auto g = random_tensor<double>({5}, rng, -1, 1);
      std::vector<Tensor64> gc{Tensor64({5}, std::vector<double>(g.data().begin(), g.data().end()))};
      for (auto& v : gc[0].mutable_data()) v *= c;
      adam_step<double>(pa, std::vector<Tensor64>{g}, sa, 1e-3);
      adam_step<double>(pb, gc, sb, 1e-3);
    }
    for (int i = 0; i < 5; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-6);
  }
}

TEST_CASE("training configuration is validated") {
  const auto data = tiny_dataset(2, 16);
  auto cfg = tiny_config();
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(cfg, data), ValidationError);
  cfg = tiny_config();
  cfg.learning_rate = 0;
  CHECK_THROWS_AS(train(cfg, data), ValidationError);
  cfg = tiny_config();
  CHECK_THROWS_AS(train(cfg, {}), ValidationError);
  cfg.model.kind = VariantKind::Cnn3dEd;
  cfg.clip_length = 18;
  CHECK_THROWS_AS(train(cfg, data), ValidationError);
  auto wrong_rate = data;
  wrong_rate[0].clip.fps = 25;
  wrong_rate[0].signal.rate = 25;
  CHECK_THROWS_AS(train(tiny_config(), wrong_rate), ValidationError);
}

TEST_CASE("training is deterministic and writes its loss curve") {
  const auto data = tiny_dataset(3, 32);
  auto cfg = tiny_config();
  cfg.epochs = 2;
  const auto dir = std::filesystem::temp_directory_path() / "physnet_test_train";
  std::filesystem::create_directories(dir);
  cfg.loss_csv = dir / "loss.csv";
  cfg.checkpoint = dir / "model.ckpt";
  std::vector<EpochReport> reports;
  const auto a = train(cfg, data, [&](const EpochReport& r) { reports.push_back(r); });
  const auto b = train(cfg, data);
  REQUIRE(a.epoch_losses.size() == 2);
  CHECK(a.epoch_losses[0] == b.epoch_losses[0]);
  CHECK(a.epoch_losses[1] == b.epoch_losses[1]);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].epoch == 1);
  for (double l : a.epoch_losses) {
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
  }

  std::ifstream in(cfg.loss_csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,mean_loss");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2);

  CheckpointInfo info;
  auto loaded = load_checkpoint(cfg.checkpoint, &info);
  CHECK(info.epoch == 2);
  std::filesystem::remove_all(dir);

  cfg.loss_csv.clear();
  cfg.checkpoint.clear();
  cfg.seed = 4;
  const auto c = train(cfg, data);
  CHECK(c.epoch_losses[0] != a.epoch_losses[0]);
}

TEST_CASE("mse training runs") {
  auto cfg = tiny_config();
  cfg.loss = LossKind::Mse;
  const auto r = train(cfg, tiny_dataset(2, 16));
  CHECK(std::isfinite(r.epoch_losses.at(0)));
  CHECK(parse_loss("mse") == LossKind::Mse);
  CHECK(parse_loss("negpea") == LossKind::NegPearson);
  CHECK_THROWS_AS(parse_loss("l1"), ValidationError);
}
