use std::sync::Arc;

use crate::agents::{JudgeModel, PolicyModel};
use crate::retrieval::Retriever;
use crate::value::{PlanValueModel, SearchValueModel};

/// The full set of backends a run needs. Cloning shares the underlying models.
#[derive(Clone)]
pub struct Backends {
    pub policy: Arc<dyn PolicyModel>,
    pub judge: Arc<dyn JudgeModel>,
    pub retriever: Arc<dyn Retriever>,
    pub plan_value: Arc<dyn PlanValueModel>,
    pub search_value: Arc<dyn SearchValueModel>,
}
