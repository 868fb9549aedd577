#include "dtn/kernels.hpp"

#include <atomic>

namespace dtn::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool on) { g_parallel.store(on); }
bool parallel_enabled() { return g_parallel.load(); }

// i-k-j loop order keeps the inner loop streaming over contiguous rows of
// B and C. Accumulation order per output row is fixed, so the OMP variants
// are bit-equal to the serial ones.

void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void matmul_omp(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void matmul_bt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

void matmul_bt_omp(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

void matmul_at_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

void matmul_at_omp(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    // Parallel over output rows i; k stays the inner accumulation axis so
    // the summation order matches the serial kernel.
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(m); ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    if (g_parallel.load())
        matmul_omp(a, b, c, m, k, n);
    else
        matmul_serial(a, b, c, m, k, n);
}

void matmul_bt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    if (g_parallel.load())
        matmul_bt_omp(a, b, c, m, k, n);
    else
        matmul_bt_serial(a, b, c, m, k, n);
}

void matmul_at(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    if (g_parallel.load())
        matmul_at_omp(a, b, c, m, k, n);
    else
        matmul_at_serial(a, b, c, m, k, n);
}

}  // namespace dtn::kernels
