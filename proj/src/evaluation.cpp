#include "fer/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fer {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0)
{
    if (classes == 0) {
        throw std::invalid_argument("ConfusionMatrix: needs at least one class");
    }
}

std::uint64_t ConfusionMatrix::cell(std::size_t truth, std::size_t predicted) const
{
    if (truth >= classes_ || predicted >= classes_) {
        throw std::out_of_range("ConfusionMatrix: cell index out of range");
    }
    return counts_[truth * classes_ + predicted];
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted)
{
    if (truth >= classes_ || predicted >= classes_) {
        throw std::invalid_argument("ConfusionMatrix: class " + std::to_string(std::max(truth, predicted)) +
                                    " out of range");
    }
    ++counts_[truth * classes_ + predicted];
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const
{
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes_; ++j) {
        s += cell(truth, j);
    }
    return s;
}

std::uint64_t ConfusionMatrix::trace() const
{
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < classes_; ++i) {
        s += counts_[i * classes_ + i];
    }
    return s;
}

std::uint64_t ConfusionMatrix::total() const
{
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                 std::size_t classes)
{
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("confusion_matrix: " + std::to_string(predictions.size()) + " predictions for " +
                                    std::to_string(labels.size()) + " labels");
    }
    ConfusionMatrix cm(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        cm.add(labels[i], predictions[i]);
    }
    return cm;
}

AccuracyMetrics accuracy_metrics(const ConfusionMatrix& cm)
{
    const std::uint64_t total = cm.total();
    if (total == 0) {
        throw std::invalid_argument("accuracy_metrics: empty confusion matrix");
    }
    AccuracyMetrics m;
    m.overall = static_cast<double>(cm.trace()) / static_cast<double>(total);
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t i = 0; i < cm.classes(); ++i) {
        const std::uint64_t row = cm.row_sum(i);
        if (row == 0) {
            m.per_class.emplace_back();
            continue;
        }
        const double acc = static_cast<double>(cm.cell(i, i)) / static_cast<double>(row);
        m.per_class.emplace_back(acc);
        sum += acc;
        ++defined;
    }
    m.macro = sum / static_cast<double>(defined);
    return m;
}

std::vector<RocCurve> roc_auc(std::span<const double> scores, std::span<const std::size_t> labels,
                              std::size_t classes)
{
    if (classes == 0 || scores.size() != labels.size() * classes) {
        throw std::invalid_argument("roc_auc: expected " + std::to_string(labels.size()) + " x " +
                                    std::to_string(classes) + " scores, got " + std::to_string(scores.size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw std::invalid_argument("roc_auc: label " + std::to_string(labels[i]) + " out of range");
        }
    }
    if (!std::all_of(scores.begin(), scores.end(), [](double s) { return std::isfinite(s); })) {
        throw std::invalid_argument("roc_auc: non-finite score");
    }

    const std::size_t n = labels.size();
    std::vector<RocCurve> curves;
    for (std::size_t c = 0; c < classes; ++c) {
        RocCurve curve;
        curve.class_index = c;
        const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), c));
        const std::size_t negatives = n - positives;
        if (positives == 0 || negatives == 0) {
            curves.push_back(std::move(curve));
            continue;
        }
        curve.defined = true;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return scores[a * classes + c] > scores[b * classes + c]; });
        curve.points.push_back({0.0, 0.0});
        std::size_t tp = 0;
        std::size_t fp = 0;
        for (std::size_t i = 0; i < n;) {
            const double s = scores[order[i] * classes + c];
            for (; i < n && scores[order[i] * classes + c] == s; ++i) {
                (labels[order[i]] == c ? tp : fp) += 1;
            }
            const RocPoint p{static_cast<double>(fp) / static_cast<double>(negatives),
                             static_cast<double>(tp) / static_cast<double>(positives)};
            const RocPoint& prev = curve.points.back();
            curve.auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
            curve.points.push_back(p);
        }
        curves.push_back(std::move(curve));
    }
    return curves;
}

// ---------------------------------------------------------------------------

PerturbSpec PerturbSpec::occlusion(std::string name, std::size_t row_begin, std::size_t row_end,
                                   std::size_t col_begin, std::size_t col_end)
{
    PerturbSpec s;
    s.name = std::move(name);
    s.kind = Kind::Occlusion;
    s.row_begin = row_begin;
    s.row_end = row_end;
    s.col_begin = col_begin;
    s.col_end = col_end;
    s.validate();
    return s;
}

PerturbSpec PerturbSpec::brightness(std::string name, double factor)
{
    PerturbSpec s;
    s.name = std::move(name);
    s.kind = Kind::Brightness;
    s.factor = factor;
    s.validate();
    return s;
}

PerturbSpec PerturbSpec::mouth() { return occlusion("mouth", 32, 47, 0, kImageSide - 1); }
PerturbSpec PerturbSpec::eyes() { return occlusion("eyes", 12, 24, 0, kImageSide - 1); }
PerturbSpec PerturbSpec::high_brightness() { return brightness("bright", 1.5); }
PerturbSpec PerturbSpec::low_brightness() { return brightness("dark", 0.5); }

void PerturbSpec::validate() const
{
    if (kind == Kind::Brightness) {
        if (!(factor > 0.0) || !std::isfinite(factor)) {
            throw std::invalid_argument("perturbation '" + name + "': brightness factor must be positive");
        }
        return;
    }
    if (row_begin > row_end || col_begin > col_end || row_end >= kImageSide || col_end >= kImageSide) {
        throw std::invalid_argument("perturbation '" + name + "': occlusion rectangle outside the 48x48 frame");
    }
}

namespace {

template <typename N>
N parse_number(std::string_view text, std::string_view whole)
{
    N v{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw std::invalid_argument("bad perturbation spec '" + std::string(whole) + "'");
    }
    return v;
}

std::pair<std::size_t, std::size_t> parse_range(std::string_view text, std::string_view whole)
{
    const auto dash = text.find('-');
    if (dash == std::string_view::npos) {
        throw std::invalid_argument("bad perturbation spec '" + std::string(whole) + "': expected <a>-<b>");
    }
    return {parse_number<std::size_t>(text.substr(0, dash), whole),
            parse_number<std::size_t>(text.substr(dash + 1), whole)};
}

}  // namespace

PerturbSpec parse_perturb_spec(std::string_view text)
{
    if (text == "mouth") {
        return PerturbSpec::mouth();
    }
    if (text == "eyes") {
        return PerturbSpec::eyes();
    }
    if (text == "bright") {
        return PerturbSpec::high_brightness();
    }
    if (text == "dark") {
        return PerturbSpec::low_brightness();
    }
    if (text.starts_with("brightness:")) {
        return PerturbSpec::brightness(std::string(text), parse_number<double>(text.substr(11), text));
    }
    if (text.starts_with("occlude:")) {
        const std::string_view rest = text.substr(8);
        const auto colon = rest.find(':');
        if (colon == std::string_view::npos) {
            throw std::invalid_argument("bad perturbation spec '" + std::string(text) +
                                        "': expected occlude:<r0>-<r1>:<c0>-<c1>");
        }
        const auto rows = parse_range(rest.substr(0, colon), text);
        const auto cols = parse_range(rest.substr(colon + 1), text);
        return PerturbSpec::occlusion(std::string(text), rows.first, rows.second, cols.first, cols.second);
    }
    throw std::invalid_argument("unknown perturbation '" + std::string(text) +
                                "' (expected mouth, eyes, bright, dark, brightness:<f> or occlude:<r0>-<r1>:<c0>-<c1>)");
}

GrayImage perturb_image(const GrayImage& image, const PerturbSpec& spec)
{
    spec.validate();
    std::vector<double> px(image.pixels().begin(), image.pixels().end());
    if (spec.kind == PerturbSpec::Kind::Occlusion) {
        for (std::size_t y = spec.row_begin; y <= spec.row_end; ++y) {
            for (std::size_t x = spec.col_begin; x <= spec.col_end; ++x) {
                px[y * kImageSide + x] = 0.0;
            }
        }
    } else {
        for (double& v : px) {
            v = std::clamp(v * spec.factor, 0.0, 1.0);
        }
    }
    return GrayImage(std::move(px));
}

MultimodalSample perturb_sample(const MultimodalSample& sample, const PerturbSpec& spec, bool image_only)
{
    MultimodalSample out = sample;
    out.image = perturb_image(sample.image, spec);
    if (!image_only) {
        out.hog = extract_hog(out.image);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> labels_of(const Dataset& data)
{
    std::vector<std::size_t> labels;
    labels.reserve(data.size());
    for (const MultimodalSample& s : data) {
        labels.push_back(s.label);
    }
    return labels;
}

template <typename T>
RobustnessRow score_row(const FerNetwork<T>& net, const Dataset& data, std::string name)
{
    const BasicTensor<T> probs = predict_probabilities(net, std::span<const MultimodalSample>(data));
    const std::size_t k = probs.dim(1);
    RobustnessRow row;
    row.spec = std::move(name);
    std::size_t correct = 0;
    double true_conf = 0.0;
    double pred_conf = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Prediction p = predict_expression(std::span<const T>(probs.raw() + i * k, k));
        SampleOutcome o;
        o.id = data[i].id;
        o.label = data[i].label;
        o.predicted = p.class_index;
        o.predicted_confidence = p.probabilities[p.class_index];
        o.true_confidence = o.label < k ? p.probabilities[o.label] : 0.0;
        o.correct = o.predicted == o.label;
        correct += o.correct ? 1 : 0;
        true_conf += o.true_confidence;
        pred_conf += o.predicted_confidence;
        row.outcomes.push_back(o);
    }
    const double n = static_cast<double>(data.size());
    row.accuracy = static_cast<double>(correct) / n;
    row.mean_true_confidence = true_conf / n;
    row.mean_predicted_confidence = pred_conf / n;
    return row;
}

MetricSpread spread(const std::vector<double>& values)
{
    MetricSpread s;
    s.min = *std::min_element(values.begin(), values.end());
    s.max = *std::max_element(values.begin(), values.end());
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    return s;
}

}  // namespace

template <typename T>
EvaluationReport evaluate(const FerNetwork<T>& net, const Dataset& data)
{
    if (data.empty()) {
        throw std::invalid_argument("evaluate: empty dataset");
    }
    const BasicTensor<T> probs = predict_probabilities(net, std::span<const MultimodalSample>(data));
    const std::size_t k = probs.dim(1);
    EvaluationReport r{{}, {}, ConfusionMatrix(k), {}, {}};
    r.probabilities.assign(probs.data().begin(), probs.data().end());
    for (std::size_t i = 0; i < data.size(); ++i) {
        r.predictions.push_back(predict_expression(std::span<const T>(probs.raw() + i * k, k)).class_index);
    }
    const std::vector<std::size_t> labels = labels_of(data);
    r.confusion = confusion_matrix(r.predictions, labels, k);
    r.accuracy = accuracy_metrics(r.confusion);
    r.roc = roc_auc(r.probabilities, labels, k);
    return r;
}

template <typename T>
std::vector<RobustnessRow> robustness_eval(const FerNetwork<T>& net, const Dataset& samples,
                                           std::span<const PerturbSpec> specs, const RobustnessOptions& options)
{
    if (samples.empty()) {
        throw std::invalid_argument("robustness_eval: no samples");
    }
    for (const PerturbSpec& s : specs) {
        s.validate();
    }
    std::vector<RobustnessRow> rows;
    rows.push_back(score_row(net, samples, "baseline"));
    for (const PerturbSpec& spec : specs) {
        Dataset perturbed;
        perturbed.reserve(samples.size());
        for (const MultimodalSample& s : samples) {
            perturbed.push_back(perturb_sample(s, spec, options.image_only));
        }
        rows.push_back(score_row(net, perturbed, spec.name));
    }
    return rows;
}

MultiSeedReport multi_seed_eval(const TrainConfig& config, const Dataset& train_set, const Dataset& test,
                                std::size_t runs)
{
    if (runs == 0) {
        throw std::invalid_argument("multi_seed_eval: need at least one run");
    }
    MultiSeedReport report;
    for (std::size_t i = 0; i < runs; ++i) {
        TrainConfig cfg = config;
        cfg.seed = config.seed + i;
        cfg.augment.seed = config.augment.seed + i;
        FerNetwork<float> net(ArchConfig::preset(cfg.preset), cfg.seed);
        train(net, train_set, nullptr, cfg);
        report.runs.push_back(evaluate(net, test));
    }

    std::vector<double> overall;
    std::vector<double> macro;
    for (const EvaluationReport& r : report.runs) {
        overall.push_back(r.accuracy.overall);
        macro.push_back(r.accuracy.macro);
    }
    report.overall = spread(overall);
    report.macro = spread(macro);

    const std::size_t k = report.runs.front().confusion.classes();
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> acc;
        std::vector<double> auc;
        for (const EvaluationReport& r : report.runs) {
            if (r.accuracy.per_class[c]) {
                acc.push_back(*r.accuracy.per_class[c]);
            }
            if (r.roc[c].defined) {
                auc.push_back(r.roc[c].auc);
            }
        }
        report.per_class.push_back(acc.empty() ? std::nullopt : std::optional(spread(acc)));
        report.auc.push_back(auc.empty() ? std::nullopt : std::optional(spread(auc)));
    }
    return report;
}

// ---------------------------------------------------------------------------

namespace {

std::string class_label(std::size_t c, std::size_t classes)
{
    return classes == kNumClasses ? std::string(kExpressionNames[c]) : "class" + std::to_string(c);
}

}  // namespace

void write_roc_csv(std::ostream& out, const std::vector<RocCurve>& curves)
{
    const auto old_precision = out.precision(17);
    out << "class,fpr,tpr\n";
    for (const RocCurve& curve : curves) {
        if (!curve.defined) {
            continue;
        }
        for (const RocPoint& p : curve.points) {
            out << class_label(curve.class_index, curves.size()) << ',' << p.fpr << ',' << p.tpr << '\n';
        }
    }
    out.precision(old_precision);
}

void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm)
{
    for (std::size_t i = 0; i < cm.classes(); ++i) {
        for (std::size_t j = 0; j < cm.classes(); ++j) {
            out << (j == 0 ? "" : ",") << cm.cell(i, j);
        }
        out << '\n';
    }
}

void write_robustness_csv(std::ostream& out, const std::vector<RobustnessRow>& rows)
{
    const auto old_precision = out.precision(17);
    out << "spec,samples,accuracy,mean_true_confidence,mean_predicted_confidence\n";
    for (const RobustnessRow& r : rows) {
        out << r.spec << ',' << r.outcomes.size() << ',' << r.accuracy << ',' << r.mean_true_confidence << ','
            << r.mean_predicted_confidence << '\n';
    }
    out.precision(old_precision);
}

template EvaluationReport evaluate(const FerNetwork<float>&, const Dataset&);
template EvaluationReport evaluate(const FerNetwork<double>&, const Dataset&);
template std::vector<RobustnessRow> robustness_eval(const FerNetwork<float>&, const Dataset&,
                                                    std::span<const PerturbSpec>, const RobustnessOptions&);
template std::vector<RobustnessRow> robustness_eval(const FerNetwork<double>&, const Dataset&,
                                                    std::span<const PerturbSpec>, const RobustnessOptions&);

}  // namespace fer
