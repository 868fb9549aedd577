#pragma once

#include <cstddef>

// Low-level dense kernels. Each has a serial reference and an OpenMP
// variant parallelized over independent output rows; per-row arithmetic
// order is identical, so results are bit-equal regardless of thread count.
namespace dtn::kernels {

// C[m,n] += A[m,k] * B[k,n]
void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);
void matmul_omp(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n);

// C[m,n] += A[m,k] * B[n,k]^T
void matmul_bt_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_bt_omp(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);

// C[m,n] += A[k,m]^T * B[k,n]
void matmul_at_serial(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n);
void matmul_at_omp(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n);

// Dispatch used by the tensor layer; set_parallel(false) forces the
// serial reference everywhere (used by tests and the benchmark).
void set_parallel(bool on);
bool parallel_enabled();

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_bt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_at(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

}  // namespace dtn::kernels
