#pragma once

#include <functional>
#include <optional>

#include "transport.hpp"

namespace tofr {

// Scalar resampling target: gated luminance of the path contribution.
struct TargetFunction {
    GateSpec gate;
    double operator()(const PathSample& s) const {
        return luminance(s.f) * gate.weight(s.len, s.u);
    }
};

// Weighted-reservoir state over path samples. W is the unbiased contribution
// weight, the resampling substitute for 1/pdf of the winner; M is confidence.
struct Reservoir {
    PathSample y;
    bool has = false;
    double w_sum = 0;
    double W = 0;
    double M = 0;
    double phat_y = 0;  // cached target value of the winner
    uint64_t nonfinite_rejected = 0;

    bool empty() const { return !has || W <= 0; }
};

// Streaming update. Non-finite weights reject the candidate but still count
// confidence; zero weights leave the winner untouched.
inline bool reservoir_update(Reservoir& r, const PathSample& cand, double w, double m_c,
                             double phat_cand, Rng& rng) {
    r.M += m_c;
    if (!std::isfinite(w) || w < 0) {
        r.nonfinite_rejected++;
        return false;
    }
    if (w <= 0) return false;
    r.w_sum += w;
    if (rng.next() * r.w_sum < w) {
        r.y = cand;
        r.has = true;
        r.phat_y = phat_cand;
        return true;
    }
    return false;
}

// W_y = w_sum / phat(y); empty reservoirs and zero targets finalize to 0.
inline void ris_finalize(Reservoir& r) {
    r.W = (r.has && r.phat_y > 0) ? r.w_sum / r.phat_y : 0;
    if (!r.has) r.W = 0;
}

// Generalized balance heuristic: m_i = M_i phat_from_i / sum_j M_j phat_from_j.
// phat_from values already include the inverse-shift Jacobian, 0 when invalid.
inline double mis_weight(const double* confidence, const double* phat_from, int n, int i) {
    double den = 0;
    for (int j = 0; j < n; ++j) den += confidence[j] * phat_from[j];
    if (den <= 0) return 0;
    return confidence[i] * phat_from[i] / den;
}

// One valid mapping of the source winner into the destination domain, plus the
// inverse-shift term needed for the destination side of the balance heuristic.
struct MergeShift {
    bool valid = false;          // forward shift usable
    PathSample mapped;           // S(x_src) in the destination domain
    double jacobian = 1;         // |dS/dx|
    double phat_src_of_dst = 0;  // phat_src(S^-1(y_dst)) * |dS^-1/dy|, 0 when invalid
};

// Merges `src` into `dst` under the destination target. Invalid shifts
// contribute zero weight but their confidence still enters the merged state.
inline void gris_merge(Reservoir& dst, const Reservoir& src, const MergeShift& shift,
                       const TargetFunction& phat_dst, double m_cap, Rng& rng) {
    double Mc = dst.M, Ms = src.M;
    Reservoir out;

    if (!dst.empty()) {
        double pc = dst.phat_y;
        double num = Mc * pc;
        double den = num + Ms * shift.phat_src_of_dst;
        double m_c = den > 0 ? num / den : 0;
        reservoir_update(out, dst.y, m_c * pc * dst.W, 0, pc, rng);
    }
    if (!src.empty() && shift.valid && shift.jacobian > 0) {
        double py = phat_dst(shift.mapped);
        if (py > 0) {
            // phat_from_src at the mapped sample: phat_src(x) / |dS/dx|
            double num = Ms * src.phat_y / shift.jacobian;
            double den = Mc * py + num;
            double m_s = den > 0 ? num / den : 0;
            reservoir_update(out, shift.mapped, m_s * py * src.W * shift.jacobian, 0, py, rng);
        }
    }
    out.M = std::min(Mc + Ms, m_cap);
    out.nonfinite_rejected = dst.nonfinite_rejected;
    ris_finalize(out);
    dst = out;
}

// Final pixel estimate: f(y) W_y, with the box gate multiplying the
// radiometric throughput (a no-op for any surviving winner).
inline Vec3 final_shading(const Reservoir& r, const GateSpec& gate) {
    if (r.empty()) return Vec3(0);
    return r.y.f * (r.W * gate.weight(r.y.len, r.y.u));
}

}  // namespace tofr
