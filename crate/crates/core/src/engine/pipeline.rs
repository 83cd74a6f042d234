use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde_json::{json, Map, Value as Json};

use super::host::{Caps, Effect, SandboxHost};
use super::*;
use crate::catalog::{self, ExecCtx, ExecOutput};
use crate::dsl::{evaluate, ObjRef, Value};
use crate::platform::Notification;

fn gov(code: ErrorCode, msg: impl Into<String>) -> GovError {
    GovError::new(code, msg)
}

impl Engine {
    fn emit(&mut self, kind: EventKind, action: Option<&ActionId>, policy: Option<&PolicyId>, payload: Json) {
        let ts = self.st.clock;
        self.io.emit(ts, kind, action, policy, payload);
    }

    fn action_ref(&self, id: &ActionId) -> &Action {
        self.st.action(id).expect("action ids handed out by the engine resolve")
    }

    fn act(&mut self, id: &ActionId) -> &mut Action {
        self.st.action_mut(id).expect("action ids handed out by the engine resolve")
    }

    fn validate_payload(&self, action_type: &str, payload: &Map<String, Json>) -> Vec<crate::error::FieldError> {
        if catalog::is_constitution_type(action_type) {
            catalog::validate_payload(&self.st.community, action_type, payload)
        } else {
            self.io.platform.descriptor().validate_payload(action_type, payload)
        }
    }

    /// Validation that happens before a command is accepted. Failures here
    /// leave no trace in the log.
    pub(crate) fn precheck(&self, cmd: &Command) -> Result<Option<Reply>> {
        let c = &self.st.community;
        match cmd {
            Command::Submit(req) => {
                if !c.is_member(&req.initiator) {
                    return Err(gov(ErrorCode::Forbidden, format!("{} is not a member", req.initiator)));
                }
                match &req.bundle {
                    None => {
                        c.action_layer(&req.action_type)?;
                        let errs = self.validate_payload(&req.action_type, &req.payload);
                        if !errs.is_empty() {
                            return Err(schema_error(&req.action_type, errs));
                        }
                    }
                    Some(b) => {
                        if req.action_type != BUNDLE_ACTION_TYPE {
                            return Err(gov(
                                ErrorCode::InvalidInput,
                                format!("bundles use action type {BUNDLE_ACTION_TYPE}"),
                            ));
                        }
                        if b.members.is_empty() {
                            return Err(gov(ErrorCode::InvalidInput, "a bundle needs at least one member"));
                        }
                        let mut layer = None;
                        let mut errs = Vec::new();
                        for (i, m) in b.members.iter().enumerate() {
                            let l = c.action_layer(&m.action_type)?;
                            if *layer.get_or_insert(l) != l {
                                return Err(gov(ErrorCode::InvalidInput, "bundle members must share a layer"));
                            }
                            for mut e in self.validate_payload(&m.action_type, &m.payload) {
                                e.field = format!("members[{i}].{}", e.field);
                                errs.push(e);
                            }
                        }
                        if !errs.is_empty() {
                            return Err(schema_error(BUNDLE_ACTION_TYPE, errs));
                        }
                    }
                }
                if !req.payload.is_empty() && req.bundle.is_some() {
                    return Err(gov(ErrorCode::InvalidInput, "a bundle carries its payloads in its members"));
                }
            }
            Command::PlatformEvent { event_id: Some(e), .. } if self.st.seen_event_ids.contains(e) => {
                return Ok(Some(Reply::Ignored { reason: format!("duplicate event {e}") }));
            }
            Command::PlatformEvent { .. } | Command::Tick => {}
            Command::Vote { voter, action, .. } => {
                if self.st.action(action).is_none() {
                    return Err(gov(ErrorCode::NotFound, format!("no action {action}")));
                }
                if !c.is_member(voter) {
                    return Err(gov(ErrorCode::Forbidden, format!("{voter} is not a member")));
                }
            }
            Command::Signal { message, .. } => {
                if !self.st.listeners.contains_key(message) {
                    return Err(gov(ErrorCode::NotFound, format!("no governance message {message}")));
                }
            }
        }
        Ok(None)
    }

    pub(crate) fn dispatch(&mut self, cmd: Command) -> Result<Reply> {
        match cmd {
            Command::Submit(req) => self.submit(req),
            Command::PlatformEvent { event_id, actor_handle, action_type, payload } => {
                self.ingest(event_id, &actor_handle, action_type, payload)
            }
            Command::Vote { voter, action, value } => self.vote(voter, action, value),
            Command::Signal { message, handle, signal } => self.signal(message, &handle, &signal),
            Command::Tick => self.tick(),
        }
    }

    fn alloc_id(&mut self) -> ActionId {
        let id = ActionId(format!("a-{}", self.st.next_action));
        self.st.next_action += 1;
        id
    }

    fn push_action(
        &mut self,
        id: ActionId,
        initiator: UserId,
        action_type: String,
        layer: Layer,
        payload: Map<String, Json>,
        origin: Origin,
    ) {
        let now = self.st.clock;
        debug_assert_eq!(EngineState::index_of(&id), Some(self.st.actions.len()));
        self.st.actions.push(Action {
            id,
            action_type,
            layer,
            initiator,
            payload,
            proposal: Proposal::new(now),
            data: DataStore::default(),
            datetime_trigger: None,
            origin,
            bundle: None,
            member_of: None,
            in_effect: false,
            undo: None,
        });
    }

    fn emit_proposed(&mut self, id: &ActionId, extra: Json) {
        let a = self.action_ref(id);
        let mut payload = json!({
            "action_type": a.action_type,
            "layer": a.layer,
            "initiator": a.initiator,
            "origin": a.origin,
            "payload": a.payload,
        });
        if let Some(b) = &a.bundle {
            payload["bundle"] = json!(b);
        }
        if let Some(t) = a.datetime_trigger {
            payload["datetime_trigger"] = json!(t);
        }
        if let (Json::Object(p), Json::Object(x)) = (&mut payload, extra) {
            p.extend(x);
        }
        let id = id.clone();
        self.emit(EventKind::ActionProposed, Some(&id), None, payload);
    }

    fn submit(&mut self, req: SubmitRequest) -> Result<Reply> {
        let id = self.alloc_id();
        match req.bundle {
            None => {
                let layer = self.st.community.action_layer(&req.action_type)?;
                self.push_action(id.clone(), req.initiator, req.action_type, layer, req.payload, Origin::WebProposal);
            }
            Some(b) => {
                let layer = self.st.community.action_layer(&b.members[0].action_type)?;
                self.push_action(
                    id.clone(),
                    req.initiator.clone(),
                    BUNDLE_ACTION_TYPE.to_string(),
                    layer,
                    Map::new(),
                    Origin::WebProposal,
                );
                let mut members = Vec::new();
                for m in b.members {
                    let mid = self.alloc_id();
                    self.push_action(mid.clone(), req.initiator.clone(), m.action_type, layer, m.payload, Origin::WebProposal);
                    self.act(&mid).member_of = Some(id.clone());
                    members.push(mid);
                }
                self.act(&id).bundle = Some(BundleSpec { kind: b.kind, members });
            }
        }
        self.act(&id).datetime_trigger = req.datetime_trigger;
        self.emit_proposed(&id, json!({}));
        let members = self.action_ref(&id).bundle.as_ref().map(|b| b.members.clone()).unwrap_or_default();
        for m in &members {
            self.emit_proposed(m, json!({"member_of": id}));
        }
        self.route_new(&id);
        let status = self.action_ref(&id).proposal.status;
        Ok(Reply::Submitted { action: id, status, decisions: Vec::new() })
    }

    fn drop_event(&mut self, reason: String, detail: Json) -> Result<Reply> {
        self.emit(EventKind::EventDropped, None, None, json!({"reason": reason, "detail": detail}));
        Ok(Reply::Ignored { reason })
    }

    fn ingest(
        &mut self,
        event_id: Option<String>,
        handle: &str,
        action_type: String,
        payload: Map<String, Json>,
    ) -> Result<Reply> {
        if let Some(e) = &event_id {
            self.st.seen_event_ids.insert(e.clone());
        }
        let Some(user) = self.st.community.user_by_handle(handle).map(|u| u.id.clone()) else {
            return self.drop_event(format!("unknown actor `{handle}`"), json!({"action_type": action_type}));
        };
        if !matches!(self.st.community.action_layer(&action_type), Ok(Layer::Platform)) {
            return self.drop_event(format!("unregistered event type `{action_type}`"), Json::Null);
        }
        let errs = self.validate_payload(&action_type, &payload);
        if !errs.is_empty() {
            return self.drop_event(format!("malformed `{action_type}` payload"), json!(errs));
        }
        let id = ActionId(format!("a-{}", self.st.next_action));
        let probe = Action {
            id: id.clone(),
            action_type: action_type.clone(),
            layer: Layer::Platform,
            initiator: user.clone(),
            payload: payload.clone(),
            proposal: Proposal::new(self.st.clock),
            data: DataStore::default(),
            datetime_trigger: None,
            origin: Origin::PlatformEvent,
            bundle: None,
            member_of: None,
            in_effect: false,
            undo: None,
        };
        if let Err(e) = self.platform_call("user_event", &probe, |p, a| p.user_event(a).map(|_| Json::Null)) {
            return self.drop_event(format!("platform rejected `{action_type}`: {}", e.message), json!(e));
        }
        let id = self.alloc_id();
        self.push_action(id.clone(), user, action_type, Layer::Platform, payload, Origin::PlatformEvent);
        self.act(&id).in_effect = true;
        let extra = match &event_id {
            Some(e) => json!({"event_id": e}),
            None => json!({}),
        };
        self.emit_proposed(&id, extra);
        self.route_new(&id);
        let status = self.action_ref(&id).proposal.status;
        Ok(Reply::Submitted { action: id, status, decisions: Vec::new() })
    }

    fn member_types(&self, id: &ActionId) -> Vec<String> {
        let a = self.action_ref(id);
        match &a.bundle {
            Some(b) => b.members.iter().map(|m| self.action_ref(m).action_type.clone()).collect(),
            None => alloc::vec![a.action_type.clone()],
        }
    }

    /// Permission gate, bypass, trigger scheduling, then evaluation.
    fn route_new(&mut self, id: &ActionId) {
        let a = self.action_ref(id);
        let initiator = a.initiator.clone();
        let is_bundle = a.bundle.is_some();
        let origin = a.origin;
        if origin != Origin::PolicyGenerated {
            let types = self.member_types(id);
            let c = &self.st.community;
            let allowed = |kind| types.iter().all(|t| c.check_permission(&initiator, kind, t).unwrap_or(false));
            if !allowed(PermissionKind::Propose) {
                self.decide(id, ProposalStatus::Failed, Basis::Denied, None, false);
                let _ = self.revert_action(id, "denied");
                self.settle_members(id, false);
                return;
            }
            if !is_bundle && allowed(PermissionKind::Execute) {
                self.decide(id, ProposalStatus::Passed, Basis::Bypass, None, false);
                let _ = self.execute_action(id);
                return;
            }
        }
        let now = self.st.clock;
        if self.action_ref(id).datetime_trigger.is_some_and(|t| t > now) {
            self.st.scheduled.push(id.clone());
            let t = self.action_ref(id).datetime_trigger;
            self.emit(EventKind::ActionScheduled, Some(id), None, json!({"datetime_trigger": t}));
            return;
        }
        self.activate(id);
    }

    fn activate(&mut self, id: &ActionId) {
        match self.select(id) {
            Some(pid) => {
                self.pin(id, &pid, 0);
                self.start(id);
            }
            None => {
                let deny = self.st.community.config.default_disposition == DefaultDisposition::Deny;
                if deny {
                    self.decide(id, ProposalStatus::Failed, Basis::Ungoverned, None, false);
                    let _ = self.revert_action(id, "default deny");
                } else {
                    self.decide(id, ProposalStatus::Passed, Basis::Ungoverned, None, false);
                    let _ = self.execute_action(id);
                }
                self.settle_members(id, false);
            }
        }
    }

    /// Same-layer policies in adjudication order: precedence, then most
    /// recently enacted. Only the first stage of a policy bundle competes.
    pub fn candidate_policies(&self, layer: Layer) -> Vec<PolicyId> {
        let mut ps: Vec<&Policy> = self
            .st
            .community
            .policies
            .iter()
            .filter(|p| p.layer == layer && p.stage.as_ref().is_none_or(|s| s.index == 0))
            .collect();
        ps.sort_by(|a, b| {
            b.precedence
                .cmp(&a.precedence)
                .then(b.enacted_at.cmp(&a.enacted_at))
                .then(b.enact_seq.cmp(&a.enact_seq))
        });
        ps.into_iter().map(|p| p.id.clone()).collect()
    }

    fn select(&mut self, id: &ActionId) -> Option<PolicyId> {
        let layer = self.action_ref(id).layer;
        self.candidate_policies(layer).into_iter().find(|pid| self.run_filter(id, pid))
    }

    fn run_filter(&mut self, id: &ActionId, pid: &PolicyId) -> bool {
        let Some((v, effects)) = self.eval_fn(id, pid, "filter") else {
            return false;
        };
        self.apply_effects(id, pid, effects);
        match v {
            Value::Bool(b) => b,
            other => {
                self.audit_fn_error(
                    id,
                    pid,
                    "filter",
                    ErrorCode::TypeError,
                    &format!("filter must return a boolean, got {}", other.type_name()),
                    None,
                );
                false
            }
        }
    }

    fn audit_fn_error(
        &mut self,
        id: &ActionId,
        pid: &PolicyId,
        function: &str,
        code: ErrorCode,
        message: &str,
        pos: Option<crate::dsl::Pos>,
    ) {
        let mut payload = json!({"function": function, "code": code, "message": message});
        if let Some(p) = pos {
            payload["line"] = json!(p.line);
            payload["column"] = json!(p.col);
        }
        self.emit(EventKind::PolicyFunctionError, Some(id), Some(pid), payload);
    }

    /// Evaluates one lifecycle function. Errors are audited and yield `None`,
    /// which callers treat as the function's neutral result.
    fn eval_fn(&mut self, id: &ActionId, pid: &PolicyId, func: &str) -> Option<(Value, Vec<Effect>)> {
        let prog = match self.program(pid) {
            Ok(p) => p,
            Err(e) => {
                self.audit_fn_error(id, pid, func, e.code, &e.message, None);
                return None;
            }
        };
        let mut caps = Caps::for_function(func);
        if !self.st.community.external_calls_enabled() {
            caps = caps.without(Capability::HttpFetch);
        }
        let budget = self.io.budget;
        let stage_started = self.st.eval.get(id).map_or(self.st.clock, |m| m.stage_started_at);
        let result = {
            let st = &self.st;
            let action = st.action(id)?;
            let policy = st.policy(pid)?;
            let mut host = SandboxHost::new(st, &mut self.io, action, policy, caps, stage_started);
            let args = [Value::Object(ObjRef::Action(id.clone())), Value::Object(ObjRef::Policy(pid.clone()))];
            let r = evaluate(&prog, func, &args, &mut host, &budget);
            r.map(|v| (v, host.into_effects()))
        };
        match result {
            Ok(ok) => Some(ok),
            Err(e) => {
                self.audit_fn_error(id, pid, func, e.code, &e.message, Some(e.pos));
                None
            }
        }
    }

    fn pin(&mut self, id: &ActionId, pid: &PolicyId, stage: usize) {
        let now = self.st.clock;
        self.act(id).proposal.governing_policy = Some(pid.clone());
        let meta = self.st.eval.entry(id.clone()).or_default();
        meta.stage = stage;
        meta.stage_started_at = now;
        self.emit(EventKind::GoverningPolicyPinned, Some(id), Some(pid), json!({"stage": stage}));
    }

    fn start(&mut self, id: &ActionId) {
        let pid = self.governing(id);
        if let Some((_, effects)) = self.eval_fn(id, &pid, "initialize") {
            self.apply_effects(id, &pid, effects);
        }
        self.run_check(id);
    }

    fn governing(&self, id: &ActionId) -> PolicyId {
        self.action_ref(id).proposal.governing_policy.clone().expect("pinned before evaluation")
    }

    fn is_trial(&self, pid: &PolicyId) -> bool {
        self.st.policy(pid).is_some_and(|p| p.trial_mode)
    }

    fn run_check(&mut self, id: &ActionId) {
        if self.action_ref(id).proposal.status != ProposalStatus::Proposed {
            return;
        }
        let pid = self.governing(id);
        let status = match self.eval_fn(id, &pid, "check") {
            Some((v, effects)) => {
                self.apply_effects(id, &pid, effects);
                match v {
                    Value::None => ProposalStatus::Proposed,
                    Value::Str(s) if s == "PASSED" => ProposalStatus::Passed,
                    Value::Str(s) if s == "FAILED" => ProposalStatus::Failed,
                    Value::Str(s) if s == "PROPOSED" => ProposalStatus::Proposed,
                    other => {
                        self.audit_fn_error(
                            id,
                            &pid,
                            "check",
                            ErrorCode::TypeError,
                            &format!("check must return PASSED, FAILED or PROPOSED, got {other}"),
                            None,
                        );
                        ProposalStatus::Proposed
                    }
                }
            }
            None => ProposalStatus::Proposed,
        };
        if self.action_ref(id).proposal.status != ProposalStatus::Proposed {
            return;
        }
        match status {
            ProposalStatus::Proposed => self.park(id, &pid),
            decided => self.finalize(id, decided),
        }
    }

    /// Still undecided after a check: intercept platform-origin actions once,
    /// notify once per stage, and keep the action pending.
    fn park(&mut self, id: &ActionId, pid: &PolicyId) {
        let trial = self.is_trial(pid);
        let a = self.action_ref(id);
        let intercept = a.origin == Origin::PlatformEvent && a.in_effect && !trial;
        let meta = self.st.eval.entry(id.clone()).or_default();
        let stage = meta.stage;
        if !meta.intercepted {
            meta.intercepted = true;
            if intercept {
                let _ = self.revert_action(id, "interception");
            }
        }
        let meta = self.st.eval.entry(id.clone()).or_default();
        if meta.notified.insert(stage) {
            if let Some((_, effects)) = self.eval_fn(id, pid, "notify") {
                self.apply_effects(id, pid, effects);
            }
        }
        if self.action_ref(id).proposal.status == ProposalStatus::Proposed && !self.st.pending.contains(id) {
            self.st.pending.push(id.clone());
        }
    }

    fn finalize(&mut self, id: &ActionId, status: ProposalStatus) {
        let pid = self.governing(id);
        let trial = self.is_trial(&pid);
        if status == ProposalStatus::Passed {
            if let Some(next) = self.next_stage(&pid) {
                if !trial {
                    if let Some((_, effects)) = self.eval_fn(id, &pid, "pass") {
                        self.apply_effects(id, &pid, effects);
                    }
                }
                if self.run_filter(id, &next.0) {
                    self.pin(id, &next.0, next.1);
                    self.start(id);
                } else {
                    self.conclude(id, status, &pid, trial, false);
                }
                return;
            }
        }
        self.conclude(id, status, &pid, trial, true);
    }

    /// The stage after `pid` in its policy bundle, with its index.
    fn next_stage(&self, pid: &PolicyId) -> Option<(PolicyId, usize)> {
        let stage = self.st.policy(pid)?.stage.as_ref()?;
        let bundle = self.st.community.policy_bundles.iter().find(|b| b.id == stage.bundle)?;
        let next = bundle.stages.get(stage.index + 1)?;
        Some((next.clone(), stage.index + 1))
    }

    fn conclude(&mut self, id: &ActionId, status: ProposalStatus, pid: &PolicyId, trial: bool, run_outcome: bool) {
        self.decide(id, status, Basis::Policy, Some(pid), trial);
        if !trial && run_outcome {
            let f = if status == ProposalStatus::Passed { "pass" } else { "fail" };
            if let Some((_, effects)) = self.eval_fn(id, pid, f) {
                self.apply_effects(id, pid, effects);
            }
        }
        self.settle_members(id, trial);
    }

    fn decide(&mut self, id: &ActionId, status: ProposalStatus, basis: Basis, pid: Option<&PolicyId>, trial: bool) {
        let now = self.st.clock;
        if !self.act(id).proposal.decide(status, now) {
            return;
        }
        self.st.pending.retain(|p| p != id);
        self.st.scheduled.retain(|p| p != id);
        for l in self.st.listeners.values_mut() {
            if &l.action == id {
                l.live = false;
            }
        }
        if trial {
            self.emit(EventKind::TrialDisposition, Some(id), pid, json!({"would": status, "basis": basis}));
        } else {
            self.emit(EventKind::Decision, Some(id), pid, json!({"status": status, "basis": basis}));
        }
    }

    /// Members of a decided bundle pass if they took effect and fail otherwise.
    fn settle_members(&mut self, id: &ActionId, trial: bool) {
        let Some(b) = self.action_ref(id).bundle.clone() else {
            return;
        };
        let bundle_status = self.action_ref(id).proposal.status;
        for m in &b.members {
            let a = self.action_ref(m);
            if a.proposal.status != ProposalStatus::Proposed {
                continue;
            }
            let status = if a.in_effect || (trial && bundle_status == ProposalStatus::Passed && b.kind == BundleKind::Combination) {
                ProposalStatus::Passed
            } else {
                ProposalStatus::Failed
            };
            self.decide(m, status, Basis::Bundle, None, trial);
        }
    }

    fn apply_effects(&mut self, id: &ActionId, pid: &PolicyId, effects: Vec<Effect>) {
        let trial = self.is_trial(pid);
        let mut to_route = Vec::new();
        for e in effects {
            if trial && !matches!(e, Effect::DataWrite { .. } | Effect::Log { .. }) {
                self.emit(EventKind::EffectApplied, Some(id), Some(pid), json!({"trial": true, "would": e}));
                continue;
            }
            match e {
                Effect::Notify { users, text, vote_kind, options } => {
                    self.deliver(id, pid, users, text, vote_kind, options);
                }
                Effect::Execute { action } => {
                    let _ = self.execute_action(&action);
                }
                Effect::Revert { action } => {
                    let _ = self.revert_action(&action, "policy");
                }
                Effect::DataWrite { scope, owner, key, value } => {
                    let res = match scope.as_str() {
                        "action" => match self.st.action_mut(&ActionId(owner.clone())) {
                            Some(a) => a.data.set(key.clone(), value.clone()),
                            None => Err(gov(ErrorCode::NotFound, "action vanished")),
                        },
                        _ => match self.st.policy_mut(&PolicyId(owner.clone())) {
                            Some(p) => p.data.set(key.clone(), value.clone()),
                            None => Err(gov(ErrorCode::NotFound, "policy vanished")),
                        },
                    };
                    match res {
                        Ok(()) => self.emit(
                            EventKind::EffectApplied,
                            Some(id),
                            Some(pid),
                            json!({"effect": "data_write", "scope": scope, "owner": owner, "key": key, "value": value}),
                        ),
                        Err(err) => self.audit_fn_error(id, pid, "data.set", err.code, &err.message, None),
                    }
                }
                Effect::Propose { action, action_type, payload, execute } => {
                    if let Some(spawned) = self.spawn(id, pid, action, action_type, payload, execute) {
                        to_route.push(spawned);
                    }
                }
                Effect::BundleRemove { bundle, member } => self.bundle_remove(&bundle, &member, pid),
                Effect::Log { text } => {
                    self.emit(EventKind::EffectApplied, Some(id), Some(pid), json!({"effect": "log", "text": text}));
                }
            }
        }
        for r in to_route {
            if self.depth >= MAX_EFFECT_DEPTH {
                self.decide(&r, ProposalStatus::Failed, Basis::Policy, Some(pid), false);
                self.audit_fn_error(&r, pid, "propose_action", ErrorCode::RuntimeError, "policy-proposed actions nest too deeply", None);
                continue;
            }
            self.depth += 1;
            self.route_new(&r);
            self.depth -= 1;
        }
    }

    fn spawn(
        &mut self,
        parent: &ActionId,
        pid: &PolicyId,
        provisional: ActionId,
        action_type: String,
        payload: Map<String, Json>,
        execute: bool,
    ) -> Option<ActionId> {
        let Ok(layer) = self.st.community.action_layer(&action_type) else {
            self.audit_fn_error(parent, pid, "propose_action", ErrorCode::UnknownActionType, &action_type, None);
            return None;
        };
        let initiator = self.action_ref(parent).initiator.clone();
        let id = self.alloc_id();
        debug_assert_eq!(id, provisional, "no allocation happens between evaluation and effect application");
        self.push_action(id.clone(), initiator, action_type, layer, payload, Origin::PolicyGenerated);
        self.emit_proposed(&id, json!({"parent": parent, "policy": pid}));
        if execute {
            self.decide(&id, ProposalStatus::Passed, Basis::PolicyExecuted, Some(pid), false);
            let _ = self.execute_action(&id);
            return None;
        }
        Some(id)
    }

    fn bundle_remove(&mut self, bundle: &ActionId, member: &ActionId, pid: &PolicyId) {
        let Some(b) = self.act(bundle).bundle.as_mut() else {
            return;
        };
        let Some(pos) = b.members.iter().position(|m| m == member) else {
            return;
        };
        b.members.remove(pos);
        let option = pos as u32 + 1;
        let proposal = &mut self.act(bundle).proposal;
        proposal.votes.retain(|v| v.value != VoteValue::Choice(option));
        for v in proposal.votes.iter_mut() {
            if let VoteValue::Choice(n) = &mut v.value {
                if *n > option {
                    *n -= 1;
                }
            }
        }
        self.emit(
            EventKind::EffectApplied,
            Some(bundle),
            Some(pid),
            json!({"effect": "bundle_remove", "member": member, "option": option}),
        );
        let trial = self.is_trial(pid);
        self.decide(member, ProposalStatus::Failed, Basis::Bundle, None, trial);
    }

    fn deliver(
        &mut self,
        id: &ActionId,
        pid: &PolicyId,
        users: Vec<UserId>,
        text: String,
        vote_kind: VoteKind,
        options: Vec<String>,
    ) {
        if users.is_empty() {
            self.emit(
                EventKind::EffectApplied,
                Some(id),
                Some(pid),
                json!({"effect": "notify", "skipped": "no recipients"}),
            );
            return;
        }
        let handles = users
            .iter()
            .map(|u| self.st.community.users.get(u).map_or_else(|| u.to_string(), |x| x.platform_handle.clone()))
            .collect();
        let n = Notification { action: id.clone(), recipients: users, handles, text, vote_kind, options };
        let res = if self.io.platform.deterministic() {
            self.io.platform.deliver(&n).map(|m| json!(m))
        } else {
            let now = self.st.clock;
            self.io.external(now, "deliver", Some(id), |io| io.platform.deliver(&n).map(|m| json!(m)))
        };
        match res.and_then(|m| {
            serde_json::from_value::<MessageRef>(m).map_err(|e| gov(ErrorCode::ExecutionFailed, e.to_string()))
        }) {
            Ok(mref) => {
                if vote_kind != VoteKind::None {
                    self.st.listeners.insert(mref.clone(), Listener { action: id.clone(), vote_kind, live: true });
                }
                self.emit(
                    EventKind::NotificationDelivered,
                    Some(id),
                    Some(pid),
                    json!({"message": mref, "recipients": n.recipients, "vote_kind": vote_kind, "options": n.options, "text": n.text}),
                );
            }
            Err(e) => {
                self.emit(EventKind::ExecutionFailed, Some(id), Some(pid), json!({"op": "deliver", "error": e}));
            }
        }
    }

    fn platform_call(
        &mut self,
        op: &str,
        action: &Action,
        f: impl FnOnce(&mut dyn Platform, &Action) -> Result<Json>,
    ) -> Result<Json> {
        if self.io.platform.deterministic() {
            f(self.io.platform.as_mut(), action)
        } else {
            let now = self.st.clock;
            self.io.external(now, op, Some(&action.id), |io| f(io.platform.as_mut(), action))
        }
    }

    fn fail_exec(&mut self, id: &ActionId, op: &str, e: &GovError) {
        self.emit(EventKind::ExecutionFailed, Some(id), None, json!({"op": op, "code": e.code, "error": e.message}));
    }

    /// Carries out an action. Executing an action already in effect is a no-op.
    pub(crate) fn execute_action(&mut self, id: &ActionId) -> Result<()> {
        let a = self.action_ref(id).clone();
        if a.in_effect {
            return Ok(());
        }
        if let Some(b) = &a.bundle {
            if b.kind == BundleKind::Election {
                let e = gov(ErrorCode::ExecutionFailed, "an election executes one of its members, not itself");
                self.fail_exec(id, "execute", &e);
                return Err(e);
            }
            let mut done: Vec<ActionId> = Vec::new();
            for m in &b.members {
                if let Err(e) = self.execute_action(m) {
                    for d in done.iter().rev() {
                        let _ = self.revert_action(d, "combination rollback");
                    }
                    let e = gov(ErrorCode::ExecutionFailed, format!("member {m} failed: {}", e.message));
                    self.fail_exec(id, "execute", &e);
                    return Err(e);
                }
                if self.action_ref(m).in_effect {
                    done.push(m.clone());
                }
            }
            self.act(id).in_effect = true;
            self.emit(EventKind::ActionExecuted, Some(id), None, json!({"members": b.members}));
            return Ok(());
        }
        if let Some(parent) = &a.member_of {
            let p = self.action_ref(parent);
            if let Some(pb) = &p.bundle {
                if pb.kind == BundleKind::Election
                    && pb.members.iter().any(|m| m != id && self.action_ref(m).in_effect)
                {
                    let e = gov(ErrorCode::ExecutionFailed, "another option of this election already executed");
                    self.fail_exec(id, "execute", &e);
                    return Err(e);
                }
            }
        }
        match a.layer {
            Layer::Constitution => {
                let before = if a.action_type.starts_with("Policy") {
                    self.st.community.policies.clone()
                } else {
                    Vec::new()
                };
                let mut out = ExecOutput::default();
                let now = self.st.clock;
                let mut seq = self.st.next_enact_seq;
                let res = {
                    let mut ctx = ExecCtx { action: id, now, next_enact_seq: &mut seq };
                    catalog::execute(&mut self.st.community, &a.action_type, &a.payload, &mut ctx, &mut out)
                };
                self.st.next_enact_seq = seq;
                match res {
                    Ok(undo) => {
                        let act = self.act(id);
                        act.undo = Some(catalog::undo_to_json(&undo));
                        act.in_effect = true;
                        self.governance_side_events(id, out, &before);
                        self.emit(EventKind::ActionExecuted, Some(id), None, json!({"action_type": a.action_type}));
                        Ok(())
                    }
                    Err(e) => {
                        self.fail_exec(id, "execute", &e);
                        Err(e)
                    }
                }
            }
            Layer::Platform => match self.platform_call("execute", &a, |p, x| p.execute(x).map(|_| Json::Null)) {
                Ok(_) => {
                    self.act(id).in_effect = true;
                    self.emit(EventKind::ActionExecuted, Some(id), None, json!({"action_type": a.action_type}));
                    Ok(())
                }
                Err(e) => {
                    self.fail_exec(id, "execute", &e);
                    Err(e)
                }
            },
        }
    }

    fn governance_side_events(&mut self, id: &ActionId, out: ExecOutput, before: &[Policy]) {
        for pid in &out.retired {
            let governs_pending = self
                .st
                .pending
                .iter()
                .chain(self.st.scheduled.iter())
                .any(|p| self.action_ref(p).proposal.governing_policy.as_ref() == Some(pid));
            if governs_pending {
                if let Some(p) = before.iter().find(|p| &p.id == pid) {
                    self.st.retired_policies.insert(pid.clone(), p.clone());
                }
            }
            self.emit(EventKind::PolicyRetired, Some(id), Some(pid), Json::Null);
        }
        for pid in &out.enacted {
            let (name, layer) = match self.st.community.policy(pid) {
                Some(p) => (p.name.clone(), p.layer),
                None => continue,
            };
            self.emit(EventKind::PolicyEnacted, Some(id), Some(pid), json!({"name": name, "layer": layer}));
        }
        if out.config_changed {
            let cfg = self.st.community.config.clone();
            self.emit(EventKind::ConfigChanged, Some(id), None, json!({"config": cfg}));
        }
        for r in out.revisions {
            self.emit(
                EventKind::DocumentRevised,
                Some(id),
                None,
                json!({"document": r.document, "version": r.version, "reverted": r.reverted}),
            );
            self.st.document_history.push(r);
        }
    }

    /// Undoes an action in effect. Reverting an action not in effect is a no-op.
    pub(crate) fn revert_action(&mut self, id: &ActionId, reason: &str) -> Result<()> {
        let a = self.action_ref(id).clone();
        if !a.in_effect {
            return Ok(());
        }
        if let Some(b) = &a.bundle {
            for m in b.members.iter().rev() {
                self.revert_action(m, reason)?;
            }
            self.act(id).in_effect = false;
            self.emit(EventKind::ActionReverted, Some(id), None, json!({"reason": reason, "reverts": id}));
            return Ok(());
        }
        let res = match a.layer {
            Layer::Constitution => {
                let before = self.st.community.policies.clone();
                let mut out = ExecOutput::default();
                let undo = a
                    .undo
                    .as_ref()
                    .ok_or_else(|| gov(ErrorCode::NoUndoRecord, format!("{id} has no undo record")))
                    .and_then(catalog::undo_from_json);
                let now = self.st.clock;
                let r = undo.and_then(|u| catalog::revert(&mut self.st.community, &u, id, now, &mut out));
                if r.is_ok() {
                    self.act(id).undo = None;
                    self.governance_side_events(id, out, &before);
                }
                r
            }
            Layer::Platform => self.platform_call("revert", &a, |p, x| p.revert(x).map(|_| Json::Null)).map(|_| ()),
        };
        match res {
            Ok(()) => {
                self.act(id).in_effect = false;
                self.emit(EventKind::ActionReverted, Some(id), None, json!({"reason": reason, "reverts": id}));
                Ok(())
            }
            Err(e) => {
                self.fail_exec(id, "revert", &e);
                Err(e)
            }
        }
    }

    fn reject_vote(&mut self, id: &ActionId, voter: &UserId, e: GovError) -> Result<Reply> {
        self.emit(
            EventKind::VoteRejected,
            Some(id),
            None,
            json!({"voter": voter, "code": e.code, "message": e.message}),
        );
        Err(e)
    }

    fn vote(&mut self, voter: UserId, id: ActionId, value: VoteValue) -> Result<Reply> {
        let a = self.action_ref(&id);
        if let Some(parent) = &a.member_of {
            let e = gov(ErrorCode::InvalidInput, format!("{id} is decided with its bundle {parent}; vote there"));
            return self.reject_vote(&id, &voter, e);
        }
        if a.proposal.status != ProposalStatus::Proposed {
            let e = gov(ErrorCode::StaleVote, format!("{id} is already {}", a.proposal.status.as_str()));
            return self.reject_vote(&id, &voter, e);
        }
        if !self.st.pending.contains(&id) {
            let e = gov(ErrorCode::InvalidInput, format!("{id} is not open for votes yet"));
            return self.reject_vote(&id, &voter, e);
        }
        let election = a.bundle.as_ref().filter(|b| b.kind == BundleKind::Election).map(|b| b.members.len());
        let check = match (election, value) {
            (Some(n), VoteValue::Choice(c)) if c == 0 || c as usize > n => {
                Err(format!("choice {c} is out of range 1..={n}"))
            }
            (Some(_), VoteValue::Boolean(_)) => Err("elections take numbered choices".to_string()),
            (None, VoteValue::Choice(_)) => Err(format!("{id} takes yes/no votes")),
            _ => Ok(()),
        };
        if let Err(msg) = check {
            return self.reject_vote(&id, &voter, gov(ErrorCode::InvalidInput, msg));
        }
        let now = self.st.clock;
        self.act(&id).proposal.cast(UserVote { voter: voter.clone(), action: id.clone(), value, cast_at: now });
        self.emit(EventKind::VoteCast, Some(&id), None, json!({"voter": voter, "value": value}));
        self.run_check(&id);
        let a = self.action_ref(&id);
        let tally = self.st.tally(&id).unwrap_or_default();
        Ok(Reply::Voted { action: id, tally, status: a.proposal.status, decisions: Vec::new() })
    }

    fn signal(&mut self, message: MessageRef, handle: &str, signal: &str) -> Result<Reply> {
        let listener = self.st.listeners[&message].clone();
        let Some(user) = self.st.community.user_by_handle(handle).map(|u| u.id.clone()) else {
            return self.drop_event(format!("signal from unknown handle `{handle}`"), json!({"message": message}));
        };
        if !listener.live {
            let e = gov(ErrorCode::StaleVote, format!("{message} no longer accepts votes"));
            return self.reject_vote(&listener.action, &user, e);
        }
        let options = self.action_ref(&listener.action).bundle.as_ref().map_or(0, |b| b.members.len());
        match self.io.platform.descriptor().decode_signal(listener.vote_kind, options, signal) {
            Ok(Some(v)) => self.vote(user, listener.action, v),
            Ok(None) => {
                let reason = format!("`{signal}` is not a vote");
                self.emit(
                    EventKind::SignalIgnored,
                    Some(&listener.action),
                    None,
                    json!({"message": message, "voter": user, "signal": signal}),
                );
                Ok(Reply::Ignored { reason })
            }
            Err(e) => self.reject_vote(&listener.action, &user, e),
        }
    }

    fn tick(&mut self) -> Result<Reply> {
        let now = self.st.clock;
        let due: Vec<ActionId> = self
            .st
            .scheduled
            .iter()
            .filter(|id| self.action_ref(id).datetime_trigger.is_some_and(|t| t <= now))
            .cloned()
            .collect();
        for id in due {
            self.st.scheduled.retain(|s| s != &id);
            self.emit(EventKind::ActionActivated, Some(&id), None, Json::Null);
            self.activate(&id);
        }
        for id in self.st.pending.clone() {
            if self.st.pending.contains(&id) {
                self.run_check(&id);
            }
        }
        Ok(Reply::Ticked { decisions: Vec::new() })
    }
}

fn schema_error(action_type: &str, errs: Vec<crate::error::FieldError>) -> GovError {
    let summary = errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; ");
    GovError::new(ErrorCode::SchemaViolation, format!("invalid {action_type} payload: {summary}")).with_fields(errs)
}
