#include "facediff/distillation.hpp"

#include <algorithm>
#include <cmath>

#include "facediff/errors.hpp"

namespace facediff::distillation {

template <class S>
Mat<S> reproject(const Mat<S>& x_from, const Mat<S>& x0_hat, double a_from, double s_from,
                 double a_to, double s_to) {
  if (x_from.rows() != x0_hat.rows() || x_from.cols() != x0_hat.cols()) {
    throw DimensionError("reproject: latent and prediction shapes differ");
  }
  if (!(s_from > 0.0)) throw SingularityError("reproject: source noise scale is zero");
  const Eigen::MatrixXd x = x_from.template cast<double>();
  const Eigen::MatrixXd p = x0_hat.template cast<double>();
  return (a_to * p + (s_to / s_from) * (x - a_from * p)).template cast<S>();
}

template <class S>
TwoStep<S> teacher_two_step(const Denoiser<S>& teacher, const Mat<S>& x_tau, int tau,
                            const diffusion::NoiseSchedule& student_schedule,
                            const diffusion::NoiseSchedule& teacher_schedule) {
  student_schedule.check_step(tau);
  check_stage_steps(teacher_schedule.num_steps, student_schedule.num_steps);
  const int hi = 2 * tau;
  const int lo = 2 * tau - 1;
  const auto& ts = teacher_schedule;
  const double s_tau = student_schedule.noise(tau);
  if (!(s_tau > 0.0)) {
    throw SingularityError("teacher_two_step: noise scale is zero at student step " +
                           std::to_string(tau));
  }
  TwoStep<S> out;
  const Mat<S> first = teacher(x_tau, hi);
  out.x_mid = reproject<S>(x_tau, first, student_schedule.signal(tau), s_tau, ts.signal(lo),
                           ts.noise(lo));
  const Mat<S> second = teacher(out.x_mid, lo);
  out.x_end = reproject<S>(out.x_mid, second, ts.signal(lo), ts.noise(lo), ts.signal(lo - 1),
                           ts.noise(lo - 1));
  return out;
}

double distill_weight(const diffusion::NoiseSchedule& student_schedule, int tau) {
  student_schedule.check_step(tau);
  return std::max(student_schedule.snr[static_cast<std::size_t>(tau - 1)], 1.0);
}

template <class S>
DistillTarget<S> distill_target(const Mat<S>& x_tau, const Mat<S>& x_end, int tau,
                                const diffusion::NoiseSchedule& student_schedule,
                                const diffusion::NoiseSchedule& teacher_schedule) {
  if (x_tau.rows() != x_end.rows() || x_tau.cols() != x_end.cols()) {
    throw DimensionError("distill_target: latent shapes differ");
  }
  student_schedule.check_step(tau);
  const int end = 2 * tau - 2;
  const double a = student_schedule.signal(tau);
  const double s = student_schedule.noise(tau);
  const double a2 = teacher_schedule.signal(end);
  const double s2 = teacher_schedule.noise(end);
  if (!(s > 0.0)) {
    throw SingularityError("distill_target: noise scale is zero at student step " +
                           std::to_string(tau));
  }
  const double ratio = s2 / s;
  const double denom = a2 - ratio * a;
  if (std::abs(denom) < 1e-12) {
    throw SingularityError("distill_target: vanishing denominator at student step " +
                           std::to_string(tau));
  }
  DistillTarget<S> target;
  target.x_tilde =
      ((x_end.template cast<double>() - ratio * x_tau.template cast<double>()) / denom)
          .template cast<S>();
  target.weight = distill_weight(student_schedule, tau);
  return target;
}

template <class S>
double distill_loss(const DistillTarget<S>& target, const Mat<S>& student_out) {
  if (target.x_tilde.rows() != student_out.rows() ||
      target.x_tilde.cols() != student_out.cols()) {
    throw DimensionError("distill_loss: target and student output shapes differ");
  }
  const Eigen::MatrixXd d =
      target.x_tilde.template cast<double>() - student_out.template cast<double>();
  return target.weight * d.squaredNorm() / static_cast<double>(d.size());
}

void check_stage_steps(int teacher_steps, int student_steps) {
  if (teacher_steps % 2 != 0) {
    throw ConfigError("parity rule: teacher step count " + std::to_string(teacher_steps) +
                      " is odd; distillation needs an even teacher (student = teacher / 2)");
  }
  if (student_steps < 1 || teacher_steps != 2 * student_steps) {
    throw ConfigError("parity rule: teacher has " + std::to_string(teacher_steps) +
                      " steps but the student has " + std::to_string(student_steps) +
                      " (teacher must be exactly twice the student)");
  }
}

template <class S>
StageResult<S> distill_stage(const DistillConfig& config,
                             const std::vector<const data::Sample*>& samples,
                             const model::DenoiserModel<S>& teacher,
                             const personalization::IdentityLibrary<S>& teacher_library) {
  check_stage_steps(teacher.schedule.num_steps, config.student_steps);
  StageResult<S> result{teacher, teacher_library, {}};
  result.student.set_steps(config.student_steps);
  const auto& student_schedule = result.student.schedule;
  const auto& teacher_schedule = teacher.schedule;
  if (!diffusion::same_tables(student_schedule, diffusion::subsample(teacher_schedule, 2),
                              1e-12)) {
    throw ConfigError("student schedule is not the stride-2 subsample of the teacher");
  }

  training::TrainConfig tc = config.train;
  tc.epochs = config.epochs;
  tc.steps = config.student_steps;

  const training::ExtraLoss<S> extra = [&](training::BatchContext<S>& ctx) {
    const Eigen::Index batch = ctx.batch;
    std::vector<int> rows;
    for (const auto* ex : *ctx.examples) {
      rows.push_back(teacher_library.index_of(ex->sample->speaker_id));
    }
    Mat<S> identity(batch, teacher_library.dim());
    for (Eigen::Index b = 0; b < batch; ++b) {
      identity.row(b) = teacher_library.embeddings().row(rows[static_cast<std::size_t>(b)]);
    }
    // Each teacher call sees its own per-sequence step; re-projection uses
    // the matching per-sequence scales.
    const auto evaluate = [&](const Mat<S>& x, const std::vector<int>& steps) {
      nn::Graph<S> g(nn::Graph<S>::Mode::inference);
      model::DenoiseInputs<S> in;
      in.frames = ctx.frames;
      in.batch = batch;
      in.audio = g.constant(ctx.audio);
      in.identity = g.constant(identity);
      in.steps = steps;
      in.x_t = g.constant(x);
      return Mat<S>(model::denoise(g, teacher, in).x0_hat.value());
    };
    const auto project_rows = [&](Mat<S>& dst, const Mat<S>& src, const Mat<S>& pred,
                                  Eigen::Index b, double a_from, double s_from, double a_to,
                                  double s_to) {
      for (Eigen::Index f = 0; f < ctx.frames; ++f) {
        const auto r = f * batch + b;
        dst.row(r) = reproject<S>(src.row(r), pred.row(r), a_from, s_from, a_to, s_to);
      }
    };
    std::vector<int> hi, lo;
    for (int tau : ctx.steps) {
      hi.push_back(2 * tau);
      lo.push_back(2 * tau - 1);
    }
    const Mat<S> first = evaluate(ctx.x_t, hi);
    Mat<S> x_mid(ctx.x_t.rows(), ctx.x_t.cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
      const int tau = ctx.steps[static_cast<std::size_t>(b)];
      const int l = 2 * tau - 1;
      project_rows(x_mid, ctx.x_t, first, b, student_schedule.signal(tau),
                   student_schedule.noise(tau), teacher_schedule.signal(l),
                   teacher_schedule.noise(l));
    }
    const Mat<S> second = evaluate(x_mid, lo);
    Mat<S> target(ctx.x_t.rows(), ctx.x_t.cols());
    std::vector<double> row_weights(static_cast<std::size_t>(ctx.x_t.rows()));
    for (Eigen::Index b = 0; b < batch; ++b) {
      const int tau = ctx.steps[static_cast<std::size_t>(b)];
      const int l = 2 * tau - 1;
      Mat<S> x_end(ctx.frames, ctx.x_t.cols());
      Mat<S> x_tau(ctx.frames, ctx.x_t.cols());
      Mat<S> tmp(ctx.x_t.rows(), ctx.x_t.cols());
      project_rows(tmp, x_mid, second, b, teacher_schedule.signal(l), teacher_schedule.noise(l),
                   teacher_schedule.signal(l - 1), teacher_schedule.noise(l - 1));
      for (Eigen::Index f = 0; f < ctx.frames; ++f) {
        x_end.row(f) = tmp.row(f * batch + b);
        x_tau.row(f) = ctx.x_t.row(f * batch + b);
      }
      const auto t = distill_target<S>(x_tau, x_end, tau, student_schedule, teacher_schedule);
      for (Eigen::Index f = 0; f < ctx.frames; ++f) {
        target.row(f * batch + b) = t.x_tilde.row(f);
        row_weights[static_cast<std::size_t>(f * batch + b)] = t.weight;
      }
    }
    return nn::weighted_mse(ctx.x0_hat, ctx.graph->constant(target), row_weights);
  };

  result.train = training::train_loop<S>(tc, samples, result.student, result.library, extra);
  return result;
}

std::string format_stage_manifest(const std::vector<StageRecord>& stages) {
  KeyValues kv;
  kv["stages"] = std::to_string(stages.size());
  std::string chain;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    if (i == 0) chain = std::to_string(st.teacher_steps);
    chain += ">" + std::to_string(st.student_steps);
    const std::string p = "stage" + std::to_string(i) + ".";
    kv[p + "teacher_steps"] = std::to_string(st.teacher_steps);
    kv[p + "student_steps"] = std::to_string(st.student_steps);
    kv[p + "checkpoint"] = st.checkpoint;
    for (const auto& [k, v] : st.metrics) kv[p + "metric." + k] = v;
  }
  kv["chain"] = chain;
  return format_key_values(kv);
}

std::vector<StageRecord> parse_stage_manifest(const std::string& text) {
  const KeyValues kv = parse_key_values(text, "stage manifest");
  const auto it = kv.find("stages");
  if (it == kv.end()) throw ParseError("stage manifest lacks 'stages'");
  const auto count = parse_int("stages", it->second);
  std::vector<StageRecord> stages;
  for (long long i = 0; i < count; ++i) {
    const std::string p = "stage" + std::to_string(i) + ".";
    const auto get = [&](const std::string& key) {
      const auto f = kv.find(p + key);
      if (f == kv.end()) throw ParseError("stage manifest lacks '" + p + key + "'");
      return f->second;
    };
    StageRecord st;
    st.teacher_steps = static_cast<int>(parse_int(p + "teacher_steps", get("teacher_steps")));
    st.student_steps = static_cast<int>(parse_int(p + "student_steps", get("student_steps")));
    st.checkpoint = get("checkpoint");
    const std::string mp = p + "metric.";
    for (const auto& [k, v] : kv) {
      if (k.rfind(mp, 0) == 0) st.metrics[k.substr(mp.size())] = v;
    }
    stages.push_back(std::move(st));
  }
  return stages;
}

#define FACEDIFF_INSTANTIATE_DISTILL(S)                                                      \
  template Mat<S> reproject(const Mat<S>&, const Mat<S>&, double, double, double, double);  \
  template TwoStep<S> teacher_two_step(const Denoiser<S>&, const Mat<S>&, int,              \
                                       const diffusion::NoiseSchedule&,                     \
                                       const diffusion::NoiseSchedule&);                    \
  template DistillTarget<S> distill_target(const Mat<S>&, const Mat<S>&, int,               \
                                           const diffusion::NoiseSchedule&,                 \
                                           const diffusion::NoiseSchedule&);                \
  template double distill_loss(const DistillTarget<S>&, const Mat<S>&);                     \
  template StageResult<S> distill_stage(const DistillConfig&,                               \
                                        const std::vector<const data::Sample*>&,            \
                                        const model::DenoiserModel<S>&,                     \
                                        const personalization::IdentityLibrary<S>&);

FACEDIFF_INSTANTIATE_DISTILL(float)
FACEDIFF_INSTANTIATE_DISTILL(double)

}  // namespace facediff::distillation
