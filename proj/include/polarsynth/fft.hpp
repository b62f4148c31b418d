#pragma once

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

#include "polarsynth/grid.hpp"

namespace polarsynth {

// 2D complex DFT on Grid<cplx>, backed by FFTW (plan cache, ESTIMATE plans).
// Conventions: forward applies e^{-i 2pi jk/N}, inverse applies e^{+i 2pi jk/N};
// both are unnormalized, so inverse(forward(x)) = N*x.
// Plan creation is serialized; execution via fftw_execute_dft is concurrent-safe.
class Fft2 {
public:
    static void forward(CGrid& g) { execute(g, FFTW_FORWARD); }
    static void inverse(CGrid& g) { execute(g, FFTW_BACKWARD); }

private:
    static void execute(CGrid& g, int sign) {
        if (g.empty()) return;
        fftw_plan plan = get_plan(g.rows(), g.cols(), sign);
        auto* buf = reinterpret_cast<fftw_complex*>(g.data());
        fftw_execute_dft(plan, buf, buf);
    }

    static fftw_plan get_plan(int rows, int cols, int sign) {
        static std::map<std::tuple<int, int, int>, fftw_plan> cache;
        static std::mutex mtx;
        std::lock_guard<std::mutex> lock(mtx);
        auto key = std::make_tuple(rows, cols, sign);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        // UNALIGNED: plans must run on arbitrary std::vector storage.
        CGrid scratch(rows, cols);
        auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
        fftw_plan plan =
            fftw_plan_dft_2d(rows, cols, buf, buf, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
        cache[key] = plan;
        return plan;
    }
};

} // namespace polarsynth
