#pragma once

#include <map>
#include <string>
#include <vector>

#include "medlab/model.hpp"
#include "medlab/rng.hpp"

namespace medlab {

// Information channels that can transfer from teacher to student:
// unimodal vision / text encoder states, encoder-fused states, decoder states.
enum class Channel { Img, Text, VL_E, VL_D };

const char* channel_name(Channel c);
Channel channel_from_name(const std::string& s);

// One learnable projection pair per transferred channel, mapping teacher and
// student representations into a common space. Owned by the distillation run
// and updated only by its optimizer.
struct ProjectionPair {
  Tensor wt;  // [teacher_dim, common_dim]
  Tensor ws;  // [student_dim, common_dim]
};

struct DistillPlan {
  std::vector<Channel> channels;   // hidden-representation AND attention selection
  bool at_self = true;             // transfer self-attention maps
  bool at_cross = true;            // transfer cross-attention maps
  double lambda_at = 1.0;
  double lambda_hr = 1.0;
  double alpha = 1.0;              // overall distillation weight
  int64_t common_dim = 64;
  bool use_hr = true;
  bool use_at = true;

  bool enabled() const { return alpha != 0.0 && (use_hr || use_at) && !channels.empty(); }
  void validate(const ModelConfig& teacher, const ModelConfig& student) const;
};

struct DistillProjections {
  std::map<Channel, ProjectionPair> pairs;

  static DistillProjections init(const DistillPlan& plan, const ModelConfig& teacher,
                                 const ModelConfig& student, DType dtype, Rng rng);
  // Square identity projections for fixed-point tests; dims must match.
  static DistillProjections identity(const DistillPlan& plan, const ModelConfig& teacher,
                                     const ModelConfig& student, DType dtype);
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  void set_requires_grad(bool b);
  void zero_grads();
};

// Mean over tokens and channels of (1 - cosine) between projected teacher and
// student last-layer states. Teacher states are constants (stop-gradient);
// pad token rows are excluded via the trace's token mask.
Var hr_loss(Graph& g, const TraceSnapshot& teacher, const ForwardTrace& student,
            const DistillPlan& plan, DistillProjections& proj);

// Mean KL(teacher || student) between last-layer attention distributions over
// the selected channels and kinds, averaged over heads and query positions.
// Head-count mismatch is handled by head-averaging each side first.
Var at_loss(Graph& g, const TraceSnapshot& teacher, const ForwardTrace& student,
            const DistillPlan& plan);

// vlp + alpha * (lambda_at * at + lambda_hr * hr). Undefined at/hr terms are
// structurally absent (no gradient path), not zero-multiplied.
Var combined_objective(Graph& g, Var vlp, Var at, Var hr, const DistillPlan& plan);

}  // namespace medlab
