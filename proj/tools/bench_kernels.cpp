#include <chrono>
#include <cstdio>
#include <random>
#include <vector>

#include "dtn/kernels.hpp"

// Compares the serial reference matmul against the OpenMP dispatch path.
int main() {
    using clock = std::chrono::steady_clock;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);

    std::printf("%8s %8s %8s  %12s %12s %8s\n", "M", "K", "N", "serial_ms",
                "omp_ms", "speedup");
    for (int dim : {64, 128, 256, 384}) {
        const int m = dim, k = dim, n = dim;
        std::vector<double> a(static_cast<std::size_t>(m) * k);
        std::vector<double> b(static_cast<std::size_t>(k) * n);
        std::vector<double> c(static_cast<std::size_t>(m) * n);
        for (auto& x : a) x = u(rng);
        for (auto& x : b) x = u(rng);

        auto time_runs = [&](auto&& fn) {
            fn();  // warm up
            const int reps = 5;
            auto t0 = clock::now();
            for (int r = 0; r < reps; ++r) fn();
            auto t1 = clock::now();
            return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
        };

        const double serial_ms = time_runs(
            [&] { dtn::kernels::matmul_serial(a.data(), b.data(), c.data(), m, k, n); });
        dtn::kernels::set_parallel(true);
        const double omp_ms = time_runs(
            [&] { dtn::kernels::matmul(a.data(), b.data(), c.data(), m, k, n); });
        std::printf("%8d %8d %8d  %12.3f %12.3f %8.2f\n", m, k, n, serial_ms, omp_ms,
                    serial_ms / omp_ms);
    }
    return 0;
}
