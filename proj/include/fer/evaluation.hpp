#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fer/dataset.hpp"
#include "fer/model.hpp"
#include "fer/training.hpp"

namespace fer {

/// cell(i, j) counts samples of true class i predicted as j.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes = kNumClasses);

    std::size_t classes() const { return classes_; }
    std::uint64_t cell(std::size_t truth, std::size_t predicted) const;
    void add(std::size_t truth, std::size_t predicted);
    std::uint64_t row_sum(std::size_t truth) const;
    std::uint64_t trace() const;
    std::uint64_t total() const;

    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                 std::size_t classes = kNumClasses);

struct AccuracyMetrics {
    double overall = 0.0;
    std::vector<std::optional<double>> per_class;  // nullopt for classes with no samples
    double macro = 0.0;                            // mean of the defined per-class values
};

/// Throws on an all-zero matrix.
AccuracyMetrics accuracy_metrics(const ConfusionMatrix& cm);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::size_t class_index = 0;
    bool defined = false;  // false when the class has no positives or no negatives
    std::vector<RocPoint> points;
    double auc = 0.0;
};

/// One-vs-rest curves from N x classes row-major scores. Equal scores form a
/// single threshold step; AUC is the trapezoid area.
std::vector<RocCurve> roc_auc(std::span<const double> scores, std::span<const std::size_t> labels,
                              std::size_t classes = kNumClasses);

// ---------------------------------------------------------------------------

struct PerturbSpec {
    enum class Kind { Occlusion, Brightness };

    std::string name;
    Kind kind = Kind::Brightness;
    // Occlusion rectangle, inclusive bounds.
    std::size_t row_begin = 0;
    std::size_t row_end = 0;
    std::size_t col_begin = 0;
    std::size_t col_end = 0;
    double factor = 1.0;

    static PerturbSpec occlusion(std::string name, std::size_t row_begin, std::size_t row_end,
                                 std::size_t col_begin, std::size_t col_end);
    static PerturbSpec brightness(std::string name, double factor);

    /// Rows 32-47, all columns.
    static PerturbSpec mouth();
    /// Rows 12-24, all columns.
    static PerturbSpec eyes();
    static PerturbSpec high_brightness();  // x1.5
    static PerturbSpec low_brightness();   // x0.5

    void validate() const;
};

/// Accepts "mouth", "eyes", "bright", "dark", "brightness:<f>" and
/// "occlude:<r0>-<r1>:<c0>-<c1>".
PerturbSpec parse_perturb_spec(std::string_view text);

GrayImage perturb_image(const GrayImage& image, const PerturbSpec& spec);

/// The perturbed image with HOG recomputed from it, unless `image_only`, in
/// which case the HOG input is left as it was. Landmarks are never changed.
MultimodalSample perturb_sample(const MultimodalSample& sample, const PerturbSpec& spec, bool image_only = false);

// ---------------------------------------------------------------------------

struct EvaluationReport {
    std::vector<std::size_t> predictions;
    std::vector<double> probabilities;  // N x classes
    ConfusionMatrix confusion;
    AccuracyMetrics accuracy;
    std::vector<RocCurve> roc;
};

template <typename T>
EvaluationReport evaluate(const FerNetwork<T>& net, const Dataset& data);

struct SampleOutcome {
    std::uint64_t id = 0;
    std::size_t label = 0;
    std::size_t predicted = 0;
    double predicted_confidence = 0.0;
    double true_confidence = 0.0;
    bool correct = false;
};

struct RobustnessRow {
    std::string spec;  // "baseline" for the unperturbed row
    std::vector<SampleOutcome> outcomes;
    double accuracy = 0.0;
    double mean_true_confidence = 0.0;
    double mean_predicted_confidence = 0.0;
};

struct RobustnessOptions {
    bool image_only = false;
};

/// First row is always the unperturbed baseline, followed by one row per spec.
template <typename T>
std::vector<RobustnessRow> robustness_eval(const FerNetwork<T>& net, const Dataset& samples,
                                           std::span<const PerturbSpec> specs, const RobustnessOptions& options = {});

struct MetricSpread {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
};

struct MultiSeedReport {
    std::vector<EvaluationReport> runs;
    MetricSpread overall;
    MetricSpread macro;
    std::vector<std::optional<MetricSpread>> per_class;
    std::vector<std::optional<MetricSpread>> auc;
};

/// Trains `runs` float networks with seeds seed, seed + 1, ... and evaluates
/// each on `test`.
MultiSeedReport multi_seed_eval(const TrainConfig& config, const Dataset& train_set, const Dataset& test,
                                std::size_t runs);

// CSV export.

void write_roc_csv(std::ostream& out, const std::vector<RocCurve>& curves);
void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm);
void write_robustness_csv(std::ostream& out, const std::vector<RobustnessRow>& rows);

}  // namespace fer
