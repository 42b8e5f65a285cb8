#pragma once

#include <cstdint>
#include <vector>

#include "kspu/errors.hpp"

// Binary-mask agreement metrics used for evaluation: IoU/Dice, squared
// generalized energy distance with ground distance 1 - IoU, and sample
// diversity.
namespace kspu::metrics {

using Mask = std::vector<std::uint8_t>;

// Intersection over union; two empty masks count as identical (IoU = 1).
inline double iou(const Mask& a, const Mask& b) {
    if (a.size() != b.size()) throw ShapeMismatch("iou: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool pa = a[i] != 0, pb = b[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double dice(const Mask& a, const Mask& b) {
    if (a.size() != b.size()) throw ShapeMismatch("dice: mask sizes differ");
    std::size_t inter = 0, sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool pa = a[i] != 0, pb = b[i] != 0;
        inter += pa && pb;
        sum += pa;
        sum += pb;
    }
    return sum == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sum);
}

inline double distance(const Mask& a, const Mask& b) { return 1.0 - iou(a, b); }

// Squared generalized energy distance between the sample set and the
// ground-truth variants: 2 E[d(S,Y)] - E[d(S,S')] - E[d(Y,Y')], each
// expectation estimated over all ordered pairs.
inline double ged2(const std::vector<Mask>& samples, const std::vector<Mask>& truths) {
    if (samples.empty() || truths.empty()) throw InvalidConfig("ged2: empty mask set");
    double cross = 0.0, ss = 0.0, yy = 0.0;
    for (const auto& s : samples)
        for (const auto& y : truths) cross += distance(s, y);
    cross /= static_cast<double>(samples.size() * truths.size());
    for (const auto& s1 : samples)
        for (const auto& s2 : samples) ss += distance(s1, s2);
    ss /= static_cast<double>(samples.size() * samples.size());
    for (const auto& y1 : truths)
        for (const auto& y2 : truths) yy += distance(y1, y2);
    yy /= static_cast<double>(truths.size() * truths.size());
    return 2.0 * cross - ss - yy;
}

// Mean pairwise 1 - IoU among the samples (distinct unordered pairs);
// zero for a single sample.
inline double diversity(const std::vector<Mask>& samples) {
    if (samples.size() < 2) return 0.0;
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t j = i + 1; j < samples.size(); ++j) {
            acc += distance(samples[i], samples[j]);
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

}  // namespace kspu::metrics
