use std::fmt;

use reltrans::eval::EvalError;
use reltrans::model::ModelError;
use reltrans::train::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
        }
    }
}

/// An error tagged with its exit-code category.
#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    inner: Box<dyn std::error::Error + Send + Sync>,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.inner, f)
    }
}

impl std::error::Error for Failure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        self.inner.source()
    }
}

impl Failure {
    fn wrap(category: Category, e: impl Into<anyhow::Error>) -> anyhow::Error {
        let e: anyhow::Error = e.into();
        let inner: Box<dyn std::error::Error + Send + Sync> = e.into();
        anyhow::Error::new(Failure { category, inner })
    }

    pub fn config(e: impl Into<anyhow::Error>) -> anyhow::Error {
        Failure::wrap(Category::Config, e)
    }

    pub fn data(e: impl Into<anyhow::Error>) -> anyhow::Error {
        Failure::wrap(Category::Data, e)
    }

    pub fn numeric(e: impl Into<anyhow::Error>) -> anyhow::Error {
        Failure::wrap(Category::Numeric, e)
    }
}

fn model_category(e: &ModelError) -> Category {
    match e {
        ModelError::Config(_) => Category::Config,
        ModelError::NonFinite(_) => Category::Numeric,
        _ => Category::Data,
    }
}

/// Exit code for an error chain; untagged errors from the library are
/// classified by type.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.category.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Config(_) => Category::Config,
                TrainError::Diverged { .. } => Category::Numeric,
                TrainError::Model(m) => model_category(m),
                _ => Category::Data,
            }
            .exit_code();
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Spec(_) => Category::Config,
                EvalError::Model(m) => model_category(m),
                _ => Category::Data,
            }
            .exit_code();
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return model_category(m).exit_code();
        }
        if cause.downcast_ref::<reltrans::StoreError>().is_some()
            || cause.downcast_ref::<reltrans::sampler::SamplerError>().is_some()
            || cause.downcast_ref::<reltrans::train::CheckpointError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return Category::Data.exit_code();
        }
    }
    1
}
