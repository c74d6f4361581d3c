// Shapes of the HuntLoop API payloads the console consumes.

export interface ObservableJson {
  type: string;
  value: string;
}

export interface HypothesisJson {
  id: string;
  suspect: string;
  suspect_name: string;
  ioa: string[];
  sighted: ObservableJson[];
  expected_unsighted: ObservableJson[];
  support: number;
  jaccard: number;
  status: string;
  provenance: string;
  legal_actions: string[];
  meta: { pinned?: boolean; unresolved_in_cti?: string[] };
  container: string | null;
  workflow: string | null;
}

export interface WorkflowStepJson {
  kind: string;
  params: Record<string, unknown>;
  next: string[];
}

export interface WorkflowJson {
  id: string;
  hypothesis: string | null;
  budget: number;
  max_transitions: number;
  entry: string[];
  steps: Record<string, WorkflowStepJson>;
  handlers: Record<string, string[]>;
  generation_report?: Record<string, unknown>;
}

export interface ContainerStateJson {
  container_id: string;
  workflow_id: string;
  pending: string[];
  transitions_used: number;
  cost_charged: number;
  status: string;
  findings: ObservableJson[];
}

export interface ContainerInfoJson {
  container_id: string;
  workflow_id: string;
  hypothesis_id: string;
  started: number;
  status: string;
  ended: number | null;
  state?: ContainerStateJson;
  step_log?: { step: string; tick: number; kind: string }[];
}

export interface WorkflowViewJson {
  workflow: WorkflowJson;
  containers: ContainerInfoJson[];
}

export interface AuditEntryJson {
  container: string;
  tick: number;
  call: string;
  args: Record<string, unknown>;
  digest: string;
}

export interface GraphNeighborsJson {
  nodes: { id: string; kind: string; name: string; pop_level: string }[];
  edges: { src: string; rkind: string; dst: string }[];
}

export interface AlertsJson {
  rules: { id: string; interval: number; handler: string[]; watermark: number }[];
  notifications: Record<string, unknown>[];
}
