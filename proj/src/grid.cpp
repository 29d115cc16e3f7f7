#include "sdsae/grid.hpp"

namespace sdsae {

Grid resample_nearest(const Grid& src, uint32_t h, uint32_t w) {
    if (src.h == h && src.w == w) return src;
    Grid out(h, w);
    for (uint32_t i = 0; i < h; ++i) {
        const size_t si = size_t(i) * src.h / h;
        for (uint32_t j = 0; j < w; ++j) {
            const size_t sj = size_t(j) * src.w / w;
            out.at(i, j) = src.at(si, sj);
        }
    }
    return out;
}

}  // namespace sdsae
