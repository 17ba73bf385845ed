//! Browser demo: generate a synthetic crowd, scatter depths, then pull the
//! crowd back onto a common ground plane. Every call returns a JSON snapshot
//! for the page to draw.

use wasm_bindgen::prelude::*;

mod session;

pub use session::{Session, Snapshot};

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    /// New crowd of `persons` people on a tilted ground plane.
    #[wasm_bindgen(constructor)]
    pub fn new(persons: usize, seed: u64, pose_sigma: f64) -> Result<Demo, JsError> {
        Session::new(persons, seed, pose_sigma).map(|inner| Demo { inner }).map_err(js)
    }

    /// Slides every person along their viewing ray by N(0, sigma²) metres.
    pub fn jitter(&mut self, sigma: f64, seed: u64) -> Result<String, JsError> {
        self.inner.jitter(sigma, seed).map_err(js)?;
        self.snapshot_json()
    }

    /// Runs the crowd refinement for `iters` steps from the current state.
    pub fn refine(&mut self, iters: usize) -> Result<String, JsError> {
        self.inner.refine(iters).map_err(js)?;
        self.snapshot_json()
    }

    pub fn reset(&mut self) -> Result<String, JsError> {
        self.inner.reset();
        self.snapshot_json()
    }

    pub fn snapshot_json(&self) -> Result<String, JsError> {
        let s = self.inner.snapshot().map_err(js)?;
        serde_json::to_string(&s).map_err(|e| js(e.to_string()))
    }
}
