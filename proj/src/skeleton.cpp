#include "deepfext/skeleton.hpp"

#include <vector>

namespace dfx {

namespace {

// Neighborhood order p2..p9: N, NE, E, SE, S, SW, W, NW (clockwise from north).
constexpr int kDy[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
constexpr int kDx[8] = {0, 1, 1, 1, 0, -1, -1, -1};

inline int px_at(const BinaryMap& m, int y, int x) {
    if (y < 0 || y >= m.height || x < 0 || x >= m.width) return 0;
    return m.px[static_cast<std::size_t>(y) * m.width + x];
}

}  // namespace

BinaryMap skeletonize(const BinaryMap& mask) {
    BinaryMap cur = mask;
    std::vector<std::size_t> kill;
    bool changed = true;
    while (changed) {
        changed = false;
        for (int sub = 0; sub < 2; ++sub) {
            kill.clear();
            for (int y = 0; y < cur.height; ++y) {
                for (int x = 0; x < cur.width; ++x) {
                    if (!cur.at(y, x)) continue;
                    int nb[8];
                    int count = 0;
                    for (int k = 0; k < 8; ++k) {
                        nb[k] = px_at(cur, y + kDy[k], x + kDx[k]);
                        count += nb[k];
                    }
                    if (count < 2 || count > 6) continue;
                    int transitions = 0;
                    for (int k = 0; k < 8; ++k) {
                        if (nb[k] == 0 && nb[(k + 1) % 8] == 1) ++transitions;
                    }
                    if (transitions != 1) continue;
                    // nb indices: 0=p2(N) 1=p3 2=p4(E) 3=p5 4=p6(S) 5=p7 6=p8(W) 7=p9
                    if (sub == 0) {
                        if (nb[0] && nb[2] && nb[4]) continue;  // p2*p4*p6
                        if (nb[2] && nb[4] && nb[6]) continue;  // p4*p6*p8
                    } else {
                        if (nb[0] && nb[2] && nb[6]) continue;  // p2*p4*p8
                        if (nb[0] && nb[4] && nb[6]) continue;  // p2*p6*p8
                    }
                    kill.push_back(static_cast<std::size_t>(y) * cur.width + x);
                }
            }
            for (std::size_t idx : kill) cur.px[idx] = 0;
            changed = changed || !kill.empty();
        }
    }
    return cur;
}

int count_components_8(const BinaryMap& mask) {
    std::vector<std::uint8_t> seen(mask.px.size(), 0);
    std::vector<std::size_t> stack;
    int components = 0;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            const std::size_t start = static_cast<std::size_t>(y) * mask.width + x;
            if (!mask.px[start] || seen[start]) continue;
            ++components;
            seen[start] = 1;
            stack.assign(1, start);
            while (!stack.empty()) {
                const std::size_t i = stack.back();
                stack.pop_back();
                const int cy = static_cast<int>(i) / mask.width;
                const int cx = static_cast<int>(i) % mask.width;
                for (int k = 0; k < 8; ++k) {
                    const int ny = cy + kDy[k], nx = cx + kDx[k];
                    if (ny < 0 || ny >= mask.height || nx < 0 || nx >= mask.width) continue;
                    const std::size_t j = static_cast<std::size_t>(ny) * mask.width + nx;
                    if (mask.px[j] && !seen[j]) {
                        seen[j] = 1;
                        stack.push_back(j);
                    }
                }
            }
        }
    }
    return components;
}

}  // namespace dfx
