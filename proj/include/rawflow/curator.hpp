#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rawflow/audio_io.hpp"
#include "rawflow/common.hpp"
#include "rawflow/rng.hpp"

namespace rawflow {

struct ClipRecord {
    std::string source_id;
    double offset = 0.0;    // seconds into the source
    double duration = 0.0;  // seconds
    std::string label;
    WaveformBuffer wav;
    std::string reject_reason;  // empty = accepted

    bool accepted() const { return reject_reason.empty(); }
};

// Optional quality scorer standing in for a pretrained model; higher = better.
using ClipScorer = std::function<double(const ClipRecord&)>;

struct FilterRules {
    double max_silence_fraction = 0.8;
    double silence_amp_threshold = 1e-3;  // about -60 dBFS
    ClipScorer scorer;                    // optional
    double score_drop_fraction = 0.0;     // bottom fraction cut when scorer set

    void check() const {
        if (max_silence_fraction < 0.0 || max_silence_fraction > 1.0 ||
            score_drop_fraction < 0.0 || score_drop_fraction > 1.0)
            throw precondition_error("FilterRules: fractions must be in [0,1]");
        if (silence_amp_threshold < 0.0)
            throw precondition_error("FilterRules: threshold must be >= 0");
    }
};

// Fraction of samples with |x| below the threshold.
inline double silence_fraction(const WaveformBuffer& buf, double amp_threshold) {
    if (buf.samples.empty()) throw precondition_error("silence_fraction: empty buffer");
    std::size_t n = 0;
    for (double s : buf.samples)
        if (std::fabs(s) < amp_threshold) ++n;
    return static_cast<double>(n) / static_cast<double>(buf.samples.size());
}

// Non-overlapping consecutive windows from offset 0; trailing remainder
// dropped. Shorter than one clip yields an empty list.
inline std::vector<ClipRecord> segment_stream(const WaveformBuffer& buf,
                                              const std::string& source_id,
                                              const std::string& label,
                                              double clip_len = 8.0) {
    if (clip_len <= 0.0) throw precondition_error("segment_stream: clip_len must be > 0");
    const std::size_t win =
        static_cast<std::size_t>(std::lround(clip_len * buf.sample_rate));
    std::vector<ClipRecord> out;
    for (std::size_t start = 0; start + win <= buf.samples.size(); start += win) {
        ClipRecord rec;
        rec.source_id = source_id;
        rec.offset = static_cast<double>(start) / buf.sample_rate;
        rec.duration = clip_len;
        rec.label = label;
        rec.wav.sample_rate = buf.sample_rate;
        rec.wav.samples.assign(buf.samples.begin() + start, buf.samples.begin() + start + win);
        out.push_back(std::move(rec));
    }
    return out;
}

// Two overlapping chunks at offsets 0 s and 1 s; both keep the source label.
inline std::vector<ClipRecord> augment_overlap(const WaveformBuffer& buf,
                                               const std::string& source_id,
                                               const std::string& label,
                                               double clip_len = 8.0) {
    const double need = clip_len + 1.0;
    if (buf.duration_s() < need)
        throw precondition_error("augment_overlap: source shorter than clip_len + 1 s");
    const std::size_t win = static_cast<std::size_t>(std::lround(clip_len * buf.sample_rate));
    std::vector<ClipRecord> out;
    for (double off : {0.0, 1.0}) {
        const std::size_t start = static_cast<std::size_t>(std::lround(off * buf.sample_rate));
        ClipRecord rec;
        rec.source_id = source_id;
        rec.offset = off;
        rec.duration = clip_len;
        rec.label = label;
        rec.wav.sample_rate = buf.sample_rate;
        rec.wav.samples.assign(buf.samples.begin() + start, buf.samples.begin() + start + win);
        out.push_back(std::move(rec));
    }
    return out;
}

// Silence rule first; optional scorer percentile cut over the survivors.
// Rejection reasons: "silence", "score".
inline void apply_filters(std::vector<ClipRecord>& pool, const FilterRules& rules) {
    rules.check();
    for (auto& rec : pool) {
        if (!rec.reject_reason.empty()) continue;
        if (silence_fraction(rec.wav, rules.silence_amp_threshold) >
            rules.max_silence_fraction)
            rec.reject_reason = "silence";
    }
    if (rules.scorer && rules.score_drop_fraction > 0.0) {
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t i = 0; i < pool.size(); ++i)
            if (pool[i].accepted()) scored.emplace_back(rules.scorer(pool[i]), i);
        std::stable_sort(scored.begin(), scored.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        const std::size_t cut = static_cast<std::size_t>(
            std::floor(rules.score_drop_fraction * static_cast<double>(scored.size())));
        for (std::size_t i = 0; i < cut; ++i)
            pool[scored[i].second].reject_reason = "score";
    }
}

// Sample without replacement so subset proportions match the reference
// histogram within one item per category (largest-remainder apportionment),
// capped by availability. Deterministic per seed. When the pool cannot cover
// the target, returns everything available and sets *shortfall.
inline std::vector<ClipRecord> balance_categories(
    const std::vector<ClipRecord>& pool,
    const std::map<std::string, double>& reference_histogram, std::size_t target_total,
    Rng& rng, bool* shortfall = nullptr) {
    if (pool.empty()) throw precondition_error("balance_categories: empty pool");
    if (shortfall) *shortfall = false;

    std::map<std::string, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!pool[i].accepted()) continue;
        if (reference_histogram.find(pool[i].label) == reference_histogram.end())
            throw precondition_error("balance_categories: label '" + pool[i].label +
                                     "' missing from reference histogram");
        by_label[pool[i].label].push_back(i);
    }
    if (by_label.empty()) throw precondition_error("balance_categories: no accepted clips");

    double ref_sum = 0.0;
    for (const auto& [k, v] : reference_histogram) {
        if (v < 0.0) throw precondition_error("balance_categories: negative reference mass");
        ref_sum += v;
    }
    if (ref_sum <= 0.0)
        throw precondition_error("balance_categories: reference histogram sums to zero");

    // largest-remainder quotas over the reference proportions
    struct Quota {
        std::string label;
        std::size_t take = 0;
        double frac = 0.0;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (const auto& [label, mass] : reference_histogram) {
        const double exact = static_cast<double>(target_total) * mass / ref_sum;
        Quota q;
        q.label = label;
        q.take = static_cast<std::size_t>(std::floor(exact));
        q.frac = exact - std::floor(q.take);
        quotas.push_back(q);
        assigned += q.take;
    }
    std::stable_sort(quotas.begin(), quotas.end(),
                     [](const Quota& a, const Quota& b) { return a.frac > b.frac; });
    for (auto& q : quotas) {
        if (assigned >= target_total) break;
        ++q.take;
        ++assigned;
    }

    // cap by availability
    for (auto& q : quotas) {
        const auto it = by_label.find(q.label);
        const std::size_t avail = it == by_label.end() ? 0 : it->second.size();
        if (q.take > avail) {
            q.take = avail;
            if (shortfall) *shortfall = true;
        }
    }

    // deterministic per-class sampling without replacement
    std::vector<ClipRecord> out;
    std::stable_sort(quotas.begin(), quotas.end(),
                     [](const Quota& a, const Quota& b) { return a.label < b.label; });
    for (const auto& q : quotas) {
        auto& idx = by_label[q.label];
        for (std::size_t k = 0; k < q.take; ++k) {
            const std::size_t j = k + rng.uniform_int(idx.size() - k);
            std::swap(idx[k], idx[j]);
            out.push_back(pool[idx[k]]);
        }
    }
    return out;
}

}  // namespace rawflow
