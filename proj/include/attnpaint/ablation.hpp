/*
 * Copyright 2026 The attnpaint Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// The four-way component grid: plain sampling, rescaled self-attention only,
// standardized guidance only, and both, scored by the crop classifier.

#pragma once

#include "attnpaint/eval.hpp"
#include "attnpaint/inpaint.hpp"
#include "attnpaint/io.hpp"

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

namespace attnpaint {

struct AblationRow {
  std::string name;
  SamplerConfig sampler;
  AccuracyReport report;
};

/// base / +PAIntA / +RASG / +both derived from `common` (which supplies the
/// shared settings; its guidance and painta fields are overridden).
inline std::vector<AblationRow> ablation_grid(const SamplerConfig& common) {
  std::vector<AblationRow> rows;
  for (int k = 0; k < 4; ++k) {
    AblationRow r;
    r.sampler = common;
    r.sampler.painta = k == 1 || k == 3;
    r.sampler.guidance = k >= 2 ? GuidanceKind::Rasg : GuidanceKind::None;
    r.name = k == 0 ? "base" : k == 1 ? "+PAIntA" : k == 2 ? "+RASG" : "+both";
    rows.push_back(std::move(r));
  }
  return rows;
}

using AblationProgressFn = std::function<void(const std::string& row, std::size_t done, std::size_t total)>;

/// Inpaints every task under every grid row in batches of `batch` and scores
/// the results. Tasks keep their own seeds, so rows share initial noise.
template <typename S>
std::vector<AblationRow> run_ablation(const std::vector<InpaintTask>& tasks, const Denoiser<S>& model,
                                      const Classifier& classifier, const SamplerConfig& common, std::size_t batch,
                                      double gate = 0.98, const AblationProgressFn& progress = {},
                                      std::vector<std::vector<Image>>* images = nullptr) {
  if (batch < 1) throw std::invalid_argument("ablation batch must be >= 1");
  std::vector<AblationRow> rows = ablation_grid(common);
  if (images) images->assign(rows.size(), {});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const NoiseSchedule sched = rows[r].sampler.schedule();
    std::vector<Image> results;
    for (std::size_t start = 0; start < tasks.size(); start += batch) {
      const std::size_t end = std::min(tasks.size(), start + batch);
      const std::vector<InpaintTask> chunk(tasks.begin() + start, tasks.begin() + end);
      for (auto& out : run_inpaint(chunk, model, sched, rows[r].sampler)) results.push_back(std::move(out.image));
      if (progress) progress(rows[r].name, end, tasks.size());
    }
    rows[r].report = evaluate_accuracy(results, tasks, classifier, gate);
    if (images) (*images)[r] = std::move(results);
  }
  return rows;
}

inline Table ablation_table(const std::vector<AblationRow>& rows) {
  Table t;
  t.header = {"config", "painta", "guidance", "correct", "total", "accuracy_pct", "background_pct", "nearby_pct"};
  auto fixed = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto pct = [&](const AccuracyReport& r, const std::string& kind) {
    auto it = r.by_kind.find(kind);
    if (it == r.by_kind.end() || it->second.second == 0) return std::string("-");
    return fixed(100.0 * it->second.first / it->second.second);
  };
  for (const auto& r : rows)
    t.rows.push_back({r.name, r.sampler.painta ? "on" : "off", guidance_name(r.sampler.guidance),
                      std::to_string(r.report.correct), std::to_string(r.report.total),
                      fixed(r.report.accuracy()), pct(r.report, "background"), pct(r.report, "nearby")});
  return t;
}

}  // namespace attnpaint
