#include "convoher2/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "convoher2/error.hpp"

namespace convoher2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (const auto& row : counts) n = std::accumulate(row.begin(), row.end(), n);
  return n;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (int k = 0; k < kNumCategories; ++k) t += counts[k][k];
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(int k) const {
  return std::accumulate(counts[k].begin(), counts[k].end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::col_sum(int k) const {
  std::uint64_t s = 0;
  for (const auto& row : counts) s += row[k];
  return s;
}

double ConfusionMatrix::accuracy() const {
  const std::uint64_t n = total();
  return n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
}

ConfusionMatrix confusion(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorCode::LengthMismatch, "predictions (" + std::to_string(predictions.size()) + ") and labels (" +
                                               std::to_string(labels.size()) + ") differ in length");
  }
  ConfusionMatrix m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i];
    const int p = predictions[i];
    if (t < 0 || t >= kNumCategories || p < 0 || p >= kNumCategories) {
      throw Error(ErrorCode::IndexOutOfRange, "category index out of range at position " + std::to_string(i));
    }
    ++m.counts[t][p];
  }
  return m;
}

Ratio Ratio::of(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw Error(ErrorCode::PreconditionViolation, "ratio with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Ratio{0, 1} : Ratio{num / g, den / g};
}

Ratio Ratio::operator+(const Ratio& o) const {
  const std::uint64_t g = std::gcd(den, o.den);
  const std::uint64_t l = den / g * o.den;
  return of(num * (l / den) + o.num * (l / o.den), l);
}

Ratio Ratio::operator*(const Ratio& o) const {
  const Ratio a = of(num, o.den);
  const Ratio b = of(o.num, den);
  return of(a.num * b.num, a.den * b.den);
}

std::array<CategoryMetrics, kNumCategories> per_category(const ConfusionMatrix& m) {
  std::array<CategoryMetrics, kNumCategories> out{};
  for (int k = 0; k < kNumCategories; ++k) {
    CategoryMetrics& c = out[k];
    const auto tp = static_cast<double>(m.counts[k][k]);
    const std::uint64_t predicted = m.col_sum(k);
    c.support = m.row_sum(k);
    c.precision_undefined = predicted == 0;
    c.recall_undefined = c.support == 0;
    c.precision = c.precision_undefined ? 0.0 : tp / static_cast<double>(predicted);
    c.recall = c.recall_undefined ? 0.0 : tp / static_cast<double>(c.support);
    c.f1 = c.precision + c.recall > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
  }
  return out;
}

Ratio exact_accuracy(const ConfusionMatrix& m) { return Ratio::of(m.trace(), m.total()); }

Ratio support_weighted_recall(const ConfusionMatrix& m) {
  const std::uint64_t n = m.total();
  Ratio sum;
  for (int k = 0; k < kNumCategories; ++k) {
    const std::uint64_t support = m.row_sum(k);
    if (support == 0) continue;
    sum = sum + Ratio::of(support, n) * Ratio::of(m.counts[k][k], support);
  }
  return sum;
}

// ---------------------------------------------------------------------------

EvaluationReport make_report(const SplitEvaluation& evaluation, std::optional<StainModality> modality,
                             std::optional<CheckpointMeta> checkpoint) {
  if (evaluation.labels.empty()) throw Error(ErrorCode::EmptySplit, "evaluation holds no samples");
  EvaluationReport r;
  r.modality = modality;
  r.matrix = confusion(evaluation.predictions, evaluation.labels);
  r.n_samples = r.matrix.total();
  r.accuracy = r.matrix.accuracy();
  r.loss = evaluation.loss;
  r.per_category = per_category(r.matrix);
  r.checkpoint = std::move(checkpoint);
  r.created_at = current_timestamp();
  return r;
}

EvaluationReport full_report(const ModelHandle& handle, const DatasetManifest& manifest,
                             std::optional<CheckpointMeta> checkpoint, Split split) {
  const SplitEvaluation ev = evaluate_split(handle, manifest, split);
  return make_report(ev, manifest.modality(), std::move(checkpoint));
}

std::string report_json(const EvaluationReport& report) {
  json j;
  j["modality"] = report.modality ? json(std::string(to_string(*report.modality))) : json(nullptr);
  j["n_samples"] = report.n_samples;
  j["accuracy"] = report.accuracy;
  j["loss"] = report.loss;
  json cats = json::array();
  for (int k = 0; k < kNumCategories; ++k) {
    const CategoryMetrics& c = report.per_category[k];
    cats.push_back({{"score", Her2Score::from_index(k).label()},
                    {"support", c.support},
                    {"precision", c.precision},
                    {"recall", c.recall},
                    {"f1", c.f1},
                    {"precision_undefined", c.precision_undefined},
                    {"recall_undefined", c.recall_undefined}});
  }
  j["per_category"] = cats;
  json rows = json::array();
  for (const auto& row : report.matrix.counts) rows.push_back(row);
  j["confusion_matrix"] = {{"rows", "true"}, {"columns", "predicted"}, {"counts", rows}};
  if (report.checkpoint) {
    j["checkpoint"] = {{"path", report.checkpoint->path.string()},
                       {"epoch", report.checkpoint->epoch},
                       {"monitored_loss", report.checkpoint->monitored_loss},
                       {"config_hash", report.checkpoint->config_hash}};
  } else {
    j["checkpoint"] = nullptr;
  }
  j["created_at"] = report.created_at;
  return j.dump(2);
}

void write_report(const EvaluationReport& report, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write report " + path.string());
  out << report_json(report) << '\n';
}

// ---------------------------------------------------------------------------

namespace {

struct Plot {
  std::string title;
  std::string y_label;
  double y_min = 0.0;
  double y_max = 1.0;
};

struct Line {
  std::string name;
  const Series* series;
  cv::Scalar colour;
};

constexpr int kWidth = 900;
constexpr int kHeight = 560;
constexpr int kLeft = 90;
constexpr int kRight = 30;
constexpr int kTop = 50;
constexpr int kBottom = 70;

std::string tick_text(double v) {
  std::ostringstream s;
  s << std::setprecision(3) << v;
  return s.str();
}

void render(const Plot& plot, const std::vector<Line>& lines, int first_epoch, int last_epoch, const fs::path& path) {
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  const int x0 = kLeft;
  const int x1 = kWidth - kRight;
  const int y0 = kHeight - kBottom;
  const int y1 = kTop;
  // A single epoch still gets a visible x interval.
  const double ex0 = first_epoch == last_epoch ? first_epoch - 0.5 : first_epoch;
  const double ex1 = first_epoch == last_epoch ? last_epoch + 0.5 : last_epoch;
  const auto px = [&](double e) { return static_cast<int>(std::lround(x0 + (e - ex0) / (ex1 - ex0) * (x1 - x0))); };
  const auto py = [&](double v) {
    const double t = (v - plot.y_min) / (plot.y_max - plot.y_min);
    return static_cast<int>(std::lround(y0 - std::clamp(t, 0.0, 1.0) * (y0 - y1)));
  };
  const cv::Scalar black(0, 0, 0);
  const cv::Scalar grid(225, 225, 225);
  const int font = cv::FONT_HERSHEY_SIMPLEX;

  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double v = plot.y_min + (plot.y_max - plot.y_min) * i / kTicks;
    const int y = py(v);
    cv::line(img, {x0, y}, {x1, y}, grid, 1);
    cv::putText(img, tick_text(v), {x0 - 60, y + 5}, font, 0.45, black, 1, cv::LINE_AA);
  }
  const int span = last_epoch - first_epoch;
  const int step = std::max(1, static_cast<int>(std::ceil(span / static_cast<double>(kTicks))));
  for (int e = first_epoch; e <= last_epoch; e += step) {
    const int x = px(e);
    cv::line(img, {x, y0}, {x, y0 + 6}, black, 1);
    cv::putText(img, std::to_string(e), {x - 10, y0 + 24}, font, 0.45, black, 1, cv::LINE_AA);
  }
  cv::rectangle(img, {x0, y1}, {x1, y0}, black, 1);
  cv::putText(img, plot.title, {x0, y1 - 18}, font, 0.7, black, 2, cv::LINE_AA);
  cv::putText(img, "epoch", {(x0 + x1) / 2 - 25, kHeight - 20}, font, 0.55, black, 1, cv::LINE_AA);

  cv::Mat label(30, 200, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(label, plot.y_label, {5, 22}, font, 0.55, black, 1, cv::LINE_AA);
  cv::Mat rotated;
  cv::rotate(label, rotated, cv::ROTATE_90_COUNTERCLOCKWISE);
  rotated.copyTo(img(cv::Rect(8, (y0 + y1) / 2 - 100, rotated.cols, rotated.rows)));

  int legend_y = y1 + 22;
  for (const Line& line : lines) {
    std::vector<cv::Point> pts;
    for (const auto& [epoch, value] : *line.series) pts.emplace_back(px(epoch), py(value));
    if (pts.size() > 1) cv::polylines(img, pts, false, line.colour, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, pts.size() > 1 ? 2 : 4, line.colour, cv::FILLED, cv::LINE_AA);
    cv::line(img, {x1 - 170, legend_y - 5}, {x1 - 140, legend_y - 5}, line.colour, 2);
    cv::putText(img, line.name, {x1 - 132, legend_y}, font, 0.5, black, 1, cv::LINE_AA);
    legend_y += 22;
  }
  if (!cv::imwrite(path.string(), img)) throw Error(ErrorCode::IoError, "cannot write figure " + path.string());
}

}  // namespace

void write_series(const Series& series, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write series " + path.string());
  out << std::setprecision(17);
  for (const auto& [epoch, value] : series) out << epoch << '\t' << value << '\n';
}

Series read_series(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read series " + path.string());
  Series out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    int epoch = 0;
    double value = 0.0;
    if (!(row >> epoch >> value)) throw Error(ErrorCode::DecodeError, "bad series line: " + line);
    out.emplace_back(epoch, value);
  }
  return out;
}

CurveFiles curves(const std::vector<EpochMetrics>& history, const fs::path& out_dir) {
  if (history.empty()) throw Error(ErrorCode::EmptyHistory, "no epochs to plot");
  fs::create_directories(out_dir);

  Series train_acc, val_acc, train_loss, val_loss;
  for (const auto& m : history) {
    train_acc.emplace_back(m.epoch, m.train_accuracy);
    train_loss.emplace_back(m.epoch, m.train_loss);
    if (m.val_accuracy) val_acc.emplace_back(m.epoch, *m.val_accuracy);
    if (m.val_loss) val_loss.emplace_back(m.epoch, *m.val_loss);
  }

  CurveFiles files;
  const auto emit = [&](const Series& s, const char* name) {
    if (s.empty()) return;
    files.series.push_back(out_dir / name);
    write_series(s, files.series.back());
  };
  emit(train_acc, "train_accuracy.tsv");
  emit(val_acc, "val_accuracy.tsv");
  emit(train_loss, "train_loss.tsv");
  emit(val_loss, "val_loss.tsv");

  const cv::Scalar blue(180, 90, 30);
  const cv::Scalar orange(20, 130, 240);
  std::vector<Line> acc_lines{{"train", &train_acc, blue}};
  std::vector<Line> loss_lines{{"train", &train_loss, blue}};
  if (!val_acc.empty()) acc_lines.push_back({"validation", &val_acc, orange});
  if (!val_loss.empty()) loss_lines.push_back({"validation", &val_loss, orange});

  double loss_max = 0.0;
  for (const auto* s : {&train_loss, &val_loss}) {
    for (const auto& p : *s) loss_max = std::max(loss_max, p.second);
  }
  const int first = history.front().epoch;
  const int last = history.back().epoch;

  files.accuracy_figure = out_dir / "accuracy.png";
  files.loss_figure = out_dir / "loss.png";
  render({"Accuracy", "accuracy", 0.0, 1.0}, acc_lines, first, last, files.accuracy_figure);
  render({"Loss", "cross-entropy", 0.0, loss_max > 0.0 ? loss_max * 1.05 : 1.0}, loss_lines, first, last,
         files.loss_figure);
  return files;
}

// ---------------------------------------------------------------------------

std::vector<ComparisonRow> default_baselines() {
  return {{"SVM", "MRI images", 0.795}, {"DenseNet", "Ultrasound images", 0.8056}, {"HASHI algorithm", "HER2SC", 0.833}};
}

std::string comparison_table(const std::vector<ComparisonRow>& measured, bool include_baselines) {
  std::vector<ComparisonRow> rows = include_baselines ? default_baselines() : std::vector<ComparisonRow>{};
  rows.insert(rows.end(), measured.begin(), measured.end());
  if (rows.empty()) throw Error(ErrorCode::PreconditionViolation, "comparison table needs at least one row");

  std::ostringstream out;
  out << "| Method | Dataset | Accuracy |\n|---|---|---|\n";
  for (const auto& r : rows) {
    if (!(r.accuracy >= 0.0 && r.accuracy <= 1.0)) {
      throw Error(ErrorCode::PreconditionViolation, "accuracy of '" + r.method_name + "' is outside [0, 1]");
    }
    out << "| " << r.method_name << " | " << r.dataset_name << " | " << std::fixed << std::setprecision(2)
        << r.accuracy * 100.0 << "% |\n";
  }
  return out.str();
}

}  // namespace convoher2
