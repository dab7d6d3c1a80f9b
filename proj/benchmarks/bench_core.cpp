#include <random>

#include <benchmark/benchmark.h>

#include "echoreg/baseline.hpp"
#include "echoreg/train.hpp"

using namespace echoreg;

namespace {

Image2D noise(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image2D img(n, n);
    for (auto& v : img.storage()) v = u(rng);
    return img;
}

DisplacementField smooth_field(int n) {
    DisplacementField f(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            f.dy()(y, x) = 2.0 * std::sin(0.1 * x);
            f.dx()(y, x) = 1.5 * std::cos(0.07 * y);
        }
    return f;
}

PhantomParams phantom_at(int n) {
    PhantomParams p;
    const double k = n / 128.0;
    p.size = n;
    p.lv_radius_x *= k;
    p.lv_radius_y *= k;
    p.wall = std::max(2.0, p.wall * k);
    return p;
}

void BM_WarpIntensity(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto img = noise(n, 1);
    const auto u = smooth_field(n);
    for (auto _ : state) benchmark::DoNotOptimize(warp_intensity(img, u));
    state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_WarpIntensity)->Arg(64)->Arg(128)->Arg(256);

void BM_WarpMask(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto mask = generate_phantom(phantom_at(n)).ed().mask;
    const auto u = smooth_field(n);
    for (auto _ : state) benchmark::DoNotOptimize(warp_mask(mask, u));
}
BENCHMARK(BM_WarpMask)->Arg(64)->Arg(128);

void BM_MutualInformationGrad(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto a = noise(n, 2), b = noise(n, 3);
    for (auto _ : state) benchmark::DoNotOptimize(mutual_information_grad(a, b));
}
BENCHMARK(BM_MutualInformationGrad)->Arg(32)->Arg(64)->Arg(128);

void BM_BendingEnergyGrad(benchmark::State& state) {
    const auto u = smooth_field(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(bending_energy_grad(u));
}
BENCHMARK(BM_BendingEnergyGrad)->Arg(128);

void BM_BoundaryDistance(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    PhantomParams p = phantom_at(n);
    const auto rec = generate_phantom(p);
    for (auto _ : state) benchmark::DoNotOptimize(boundary_distance(rec.ed().mask, rec.es().mask, Label::myocardium));
}
BENCHMARK(BM_BoundaryDistance)->Arg(128)->Arg(256);

void BM_LucasKanade(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const auto rec = generate_phantom(phantom_at(n));
    for (auto _ : state) benchmark::DoNotOptimize(lucas_kanade_flow(rec.ed().image, rec.es().image));
}
BENCHMARK(BM_LucasKanade)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_DeformNetPredict(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    DeformNet net(DeformNetConfig{}, 1);
    const auto f = noise(n, 4), m = noise(n, 5);
    for (auto _ : state) benchmark::DoNotOptimize(net.predict(f, m));
}
BENCHMARK(BM_DeformNetPredict)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
